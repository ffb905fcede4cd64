//! Mollified density and conditional-expectation estimators.
//!
//! Points are stored flat, `N x d` row-major. Vector-valued regressands `m(Y)`
//! are likewise `N x k`. Two evaluation paths are provided:
//!
//! * direct sums (`kde`, `nw_conditional`): exact, `O(N Q)`;
//! * [`GridSmoother`]: linear binning onto a lattice of spacing `b/8`,
//!   separable kernel smoothing and linear interpolation, `O(N + grid)`.
//!   Numerator and denominator are interpolated separately, so every estimate
//!   is still a convex combination of the `m(Y_i)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Channel};

/// Denominators below this are treated as "no data here".
pub const DENOM_FLOOR: f64 = 1e-300;

/// Silverman-type constant in `b = c std N^(-1/5)`.
pub const SILVERMAN_C: f64 = 1.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    #[default]
    Gaussian,
    Epanechnikov,
}

/// `g_eps(x) = eps^-d g(x / eps)` for a radial profile `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub shape: KernelShape,
    pub bandwidth: f64,
    pub dim: usize,
}

impl MollifierSpec {
    pub fn gaussian(bandwidth: f64, dim: usize) -> Self {
        Self {
            shape: KernelShape::Gaussian,
            bandwidth,
            dim,
        }
    }

    pub fn epanechnikov(bandwidth: f64, dim: usize) -> Self {
        Self {
            shape: KernelShape::Epanechnikov,
            bandwidth,
            dim,
        }
    }

    /// Unit-bandwidth profile as a function of `|z|^2`.
    pub fn profile(&self, z_sq: f64) -> f64 {
        match self.shape {
            KernelShape::Gaussian => (-0.5 * z_sq).exp() * (2.0 * std::f64::consts::PI).powf(-0.5 * self.dim as f64),
            KernelShape::Epanechnikov => {
                if z_sq >= 1.0 {
                    0.0
                } else {
                    // normalisers: 3/4 on the interval, 2/pi on the disc
                    let c = if self.dim == 1 { 0.75 } else { 2.0 / std::f64::consts::PI };
                    c * (1.0 - z_sq)
                }
            }
        }
    }

    /// `g_eps(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let b = self.bandwidth;
        let z_sq: f64 = x.iter().map(|v| (v / b).powi(2)).sum();
        self.profile(z_sq) / b.powi(self.dim as i32)
    }

    /// Support radius in units of the bandwidth (Gaussian truncated at 5).
    pub fn radius(&self) -> f64 {
        match self.shape {
            KernelShape::Gaussian => 5.0,
            KernelShape::Epanechnikov => 1.0,
        }
    }

    fn validate(&self, points: &[f64]) -> Result<()> {
        if self.dim == 0 || self.dim > 2 {
            return Err(Error::Dimension { expected: 1, got: self.dim });
        }
        if points.len() % self.dim != 0 {
            return Err(Error::Dimension {
                expected: self.dim,
                got: points.len() % self.dim,
            });
        }
        let scale = points.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let floor = 64.0 * f64::EPSILON * scale;
        if !(self.bandwidth > floor) || !self.bandwidth.is_finite() {
            return Err(Error::Bandwidth {
                bandwidth: self.bandwidth,
                floor,
            });
        }
        Ok(())
    }
}

/// `1.06 std(x) N^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    SILVERMAN_C * var.sqrt() * n.powf(-0.2)
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension { expected: n, got: w.len() });
        }
    }
    Ok(())
}

/// `sum_i w_i g_eps(x - X_i) / sum_i w_i` at each query point.
pub fn kde(points: &[f64], weights: Option<&[f64]>, spec: &MollifierSpec, query: &[f64]) -> Result<Vec<f64>> {
    spec.validate(points)?;
    let d = spec.dim;
    let n = points.len() / d;
    check_weights(weights, n)?;
    let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
    if !(total > 0.0) {
        return Err(Error::Domain {
            what: "total weight",
            value: total,
            domain: "(0, inf)".into(),
        });
    }
    Ok(query
        .par_chunks(d)
        .map(|q| {
            let mut acc = 0.0;
            let mut tmp = [0.0; 2];
            for (i, p) in points.chunks_exact(d).enumerate() {
                for k in 0..d {
                    tmp[k] = q[k] - p[k];
                }
                acc += weights.map_or(1.0, |w| w[i]) * spec.eval(&tmp[..d]);
            }
            acc / total
        })
        .collect())
}

/// Conditional-mean estimates at a list of query points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEstimate {
    /// Query points, `Q x d`.
    pub query: Vec<f64>,
    /// Estimates, `Q x k`.
    pub values: Vec<f64>,
    pub value_dim: usize,
    /// Kernel-weighted mass `sum_i w_i K(.)` behind each estimate.
    pub mass: Vec<f64>,
    /// Queries where the denominator fell below the floor (or bins that were
    /// empty and inherited a neighbour).
    pub degenerate: Vec<bool>,
}

impl ConditionalEstimate {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn value(&self, q: usize) -> &[f64] {
        &self.values[q * self.value_dim..(q + 1) * self.value_dim]
    }
}

/// Nadaraya–Watson estimate of `E[m(Y) | X = x]`.
///
/// `m_values` holds `m(Y_i)` as `N x k`. Queries whose denominator is below
/// [`DENOM_FLOOR`] return 0 and are flagged.
pub fn nw_conditional(xs: &[f64], m_values: &[f64], value_dim: usize, weights: Option<&[f64]>, spec: &MollifierSpec, query: &[f64]) -> Result<ConditionalEstimate> {
    spec.validate(xs)?;
    let d = spec.dim;
    let n = xs.len() / d;
    if m_values.len() != n * value_dim {
        return Err(Error::Dimension {
            expected: n * value_dim,
            got: m_values.len(),
        });
    }
    check_weights(weights, n)?;
    let per_query: Vec<(Vec<f64>, f64, bool)> = query
        .par_chunks(d)
        .map(|q| {
            let mut num = vec![0.0; value_dim];
            let mut den = 0.0;
            let mut tmp = [0.0; 2];
            for (i, p) in xs.chunks_exact(d).enumerate() {
                for k in 0..d {
                    tmp[k] = q[k] - p[k];
                }
                let k = weights.map_or(1.0, |w| w[i]) * spec.eval(&tmp[..d]);
                den += k;
                for (a, m) in num.iter_mut().zip(&m_values[i * value_dim..(i + 1) * value_dim]) {
                    *a += k * m;
                }
            }
            if den < DENOM_FLOOR {
                (vec![0.0; value_dim], den, true)
            } else {
                (num.into_iter().map(|a| a / den).collect(), den, false)
            }
        })
        .collect();
    let mut out = ConditionalEstimate {
        query: query.to_vec(),
        values: Vec::with_capacity(per_query.len() * value_dim),
        value_dim,
        mass: Vec::with_capacity(per_query.len()),
        degenerate: Vec::with_capacity(per_query.len()),
    };
    for (v, m, f) in per_query {
        out.values.extend(v);
        out.mass.push(m);
        out.degenerate.push(f);
    }
    Ok(out)
}

/// Per-bin weighted mean of `m(Y)` over `n_bins` equal bins of `range`
/// (1-D `X` only). Points outside the range count toward the edge bins.
/// Empty bins inherit the nearest non-empty bin and are flagged.
pub fn binned_conditional(
    xs: &[f64],
    m_values: &[f64],
    value_dim: usize,
    weights: Option<&[f64]>,
    n_bins: usize,
    range: (f64, f64),
) -> Result<ConditionalEstimate> {
    if n_bins < 1 {
        return Err(Error::Domain {
            what: "n_bins",
            value: 0.0,
            domain: "[1, inf)".into(),
        });
    }
    let n = xs.len();
    if m_values.len() != n * value_dim {
        return Err(Error::Dimension {
            expected: n * value_dim,
            got: m_values.len(),
        });
    }
    check_weights(weights, n)?;
    let (lo, hi) = range;
    let width = (hi - lo) / n_bins as f64;
    let mut num = vec![0.0; n_bins * value_dim];
    let mut den = vec![0.0; n_bins];
    for (i, &x) in xs.iter().enumerate() {
        let b = bin_index(x, lo, width, n_bins);
        let w = weights.map_or(1.0, |w| w[i]);
        den[b] += w;
        for k in 0..value_dim {
            num[b * value_dim + k] += w * m_values[i * value_dim + k];
        }
    }
    let filled: Vec<usize> = (0..n_bins).filter(|&b| den[b] > DENOM_FLOOR).collect();
    let mut values = vec![0.0; n_bins * value_dim];
    let mut degenerate = vec![false; n_bins];
    for b in 0..n_bins {
        let src = if den[b] > DENOM_FLOOR {
            Some(b)
        } else {
            degenerate[b] = true;
            filled.iter().copied().min_by_key(|&f| f.abs_diff(b))
        };
        if let Some(s) = src {
            for k in 0..value_dim {
                values[b * value_dim + k] = num[s * value_dim + k] / den[s];
            }
        }
    }
    Ok(ConditionalEstimate {
        query: (0..n_bins).map(|b| lo + (b as f64 + 0.5) * width).collect(),
        values,
        value_dim,
        mass: den,
        degenerate,
    })
}

fn bin_index(x: f64, lo: f64, width: f64, n_bins: usize) -> usize {
    (((x - lo) / width).floor() as isize).clamp(0, n_bins as isize - 1) as usize
}

/// Looks up the binned estimate for an arbitrary `x`.
pub fn binned_lookup(est: &ConditionalEstimate, range: (f64, f64), x: f64) -> &[f64] {
    let n_bins = est.len();
    let width = (range.1 - range.0) / n_bins as f64;
    est.value(bin_index(x, range.0, width, n_bins))
}

/// Lattice points per bandwidth in the binned smoother.
pub const GRID_POINTS_PER_BANDWIDTH: f64 = 8.0;

/// Binned kernel smoother for `d` in {1, 2}.
///
/// Accumulates `sum w_i` and `sum w_i m(Y_i)` onto a lattice of spacing `b/8`
/// by linear (cloud-in-cell) binning, convolves each with the sampled kernel
/// along every axis, and interpolates linearly at the queries.
#[derive(Debug, Clone)]
pub struct GridSmoother {
    spec: MollifierSpec,
    origin: [f64; 2],
    spacing: f64,
    shape: [usize; 2],
    value_dim: usize,
    /// Smoothed denominator, lattice row-major.
    den: Vec<f64>,
    /// Smoothed numerators, `value_dim` lattices back to back.
    num: Vec<f64>,
    total_weight: f64,
}

const MAX_AXIS_1D: usize = 1 << 16;
const MAX_AXIS_2D: usize = 768;

impl GridSmoother {
    /// Builds the smoothed lattices. `m_values` may be empty (`value_dim = 0`)
    /// for density estimation only.
    pub fn build(points: &[f64], m_values: &[f64], value_dim: usize, weights: Option<&[f64]>, spec: &MollifierSpec) -> Result<Self> {
        spec.validate(points)?;
        let d = spec.dim;
        let n = points.len() / d;
        if n == 0 {
            return Err(Error::Dimension { expected: 1, got: 0 });
        }
        if m_values.len() != n * value_dim {
            return Err(Error::Dimension {
                expected: n * value_dim,
                got: m_values.len(),
            });
        }
        check_weights(weights, n)?;
        let b = spec.bandwidth;
        let reach = spec.radius() * b;
        let mut lo = [0.0f64; 2];
        let mut hi = [0.0f64; 2];
        for k in 0..d {
            let (mn, mx) = points
                .iter()
                .skip(k)
                .step_by(d)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
            lo[k] = mn - reach - b;
            hi[k] = mx + reach + b;
        }
        let max_axis = if d == 1 { MAX_AXIS_1D } else { MAX_AXIS_2D };
        let extent = (0..d).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let spacing = (b / GRID_POINTS_PER_BANDWIDTH).max(extent / (max_axis - 1) as f64);
        let mut shape = [1usize; 2];
        for k in 0..d {
            shape[k] = ((hi[k] - lo[k]) / spacing).ceil() as usize + 2;
        }
        let cells = shape[0] * shape[1];
        let mut den = vec![0.0; cells];
        let mut num = vec![0.0; cells * value_dim];
        let mut total_weight = 0.0;
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            total_weight += w;
            let p = &points[i * d..(i + 1) * d];
            let m = &m_values[i * value_dim..(i + 1) * value_dim];
            let mut deposit = |cell: usize, frac: f64| {
                den[cell] += w * frac;
                for (k, mv) in m.iter().enumerate() {
                    num[k * cells + cell] += w * frac * mv;
                }
            };
            let s0 = (p[0] - lo[0]) / spacing;
            let i0 = s0.floor() as usize;
            let f0 = s0 - i0 as f64;
            if d == 1 {
                deposit(i0, 1.0 - f0);
                deposit(i0 + 1, f0);
            } else {
                let s1 = (p[1] - lo[1]) / spacing;
                let i1 = s1.floor() as usize;
                let f1 = s1 - i1 as f64;
                let at = |a: usize, c: usize| a * shape[1] + c;
                deposit(at(i0, i1), (1.0 - f0) * (1.0 - f1));
                deposit(at(i0 + 1, i1), f0 * (1.0 - f1));
                deposit(at(i0, i1 + 1), (1.0 - f0) * f1);
                deposit(at(i0 + 1, i1 + 1), f0 * f1);
            }
        }
        let taps = kernel_taps(spec, spacing);
        smooth(&mut den, shape, d, &taps);
        for k in 0..value_dim {
            smooth(&mut num[k * cells..(k + 1) * cells], shape, d, &taps);
        }
        Ok(Self {
            spec: *spec,
            origin: lo,
            spacing,
            shape,
            value_dim,
            den,
            num,
            total_weight,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn stencil(&self, q: &[f64]) -> Option<([usize; 4], [f64; 4], usize)> {
        let d = self.spec.dim;
        let mut idx = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..d {
            let s = (q[k] - self.origin[k]) / self.spacing;
            if !(s >= 0.0) || s >= (self.shape[k] - 1) as f64 {
                return None;
            }
            idx[k] = s.floor() as usize;
            frac[k] = s - idx[k] as f64;
        }
        if d == 1 {
            Some(([idx[0], idx[0] + 1, 0, 0], [1.0 - frac[0], frac[0], 0.0, 0.0], 2))
        } else {
            let at = |a: usize, c: usize| a * self.shape[1] + c;
            Some((
                [at(idx[0], idx[1]), at(idx[0] + 1, idx[1]), at(idx[0], idx[1] + 1), at(idx[0] + 1, idx[1] + 1)],
                [(1.0 - frac[0]) * (1.0 - frac[1]), frac[0] * (1.0 - frac[1]), (1.0 - frac[0]) * frac[1], frac[0] * frac[1]],
                4,
            ))
        }
    }

    /// Smoothed `sum_i w_i g_b(q - X_i)` (not normalised by the total weight).
    pub fn mass_at(&self, q: &[f64]) -> f64 {
        match self.stencil(q) {
            None => 0.0,
            Some((cells, w, k)) => (0..k).map(|j| w[j] * self.den[cells[j]]).sum(),
        }
    }

    /// Density estimate `sum_i w_i g_b(q - X_i) / sum_i w_i`.
    pub fn density_at(&self, q: &[f64]) -> f64 {
        self.mass_at(q) / self.total_weight
    }

    /// Writes the conditional mean at `q` into `out` (length `value_dim`);
    /// returns the kernel mass, or `None` (and zeros) when degenerate.
    pub fn conditional_at(&self, q: &[f64], out: &mut [f64]) -> Option<f64> {
        let cells_n = self.shape[0] * self.shape[1];
        out.iter_mut().for_each(|v| *v = 0.0);
        let (cells, w, k) = self.stencil(q)?;
        let den: f64 = (0..k).map(|j| w[j] * self.den[cells[j]]).sum();
        if den < DENOM_FLOOR {
            return None;
        }
        for (c, o) in out.iter_mut().enumerate().take(self.value_dim) {
            let num: f64 = (0..k).map(|j| w[j] * self.num[c * cells_n + cells[j]]).sum();
            *o = num / den;
        }
        Some(den)
    }

    /// Conditional estimates at a list of queries.
    pub fn conditional(&self, query: &[f64]) -> ConditionalEstimate {
        let d = self.spec.dim;
        let q_n = query.len() / d;
        let mut out = ConditionalEstimate {
            query: query.to_vec(),
            values: vec![0.0; q_n * self.value_dim],
            value_dim: self.value_dim,
            mass: vec![0.0; q_n],
            degenerate: vec![false; q_n],
        };
        for (i, q) in query.chunks_exact(d).enumerate() {
            match self.conditional_at(q, &mut out.values[i * self.value_dim..(i + 1) * self.value_dim]) {
                Some(m) => out.mass[i] = m,
                None => out.degenerate[i] = true,
            }
        }
        out
    }
}

/// Kernel regression evaluated at its own design points, for repeated use
/// with different regressands over the same positions. Equivalent to
/// `GridSmoother::build(points, m, ..)` followed by `conditional_at(X_i)`,
/// bit for bit, but the lattice geometry, stencils and smoothed denominator
/// are computed once.
#[derive(Debug, Clone)]
pub struct FixedDesign {
    lattice: GridSmoother,
    weights: Option<Vec<f64>>,
    cells: Vec<[u32; 4]>,
    fracs: Vec<[f64; 4]>,
    den_at: Vec<f64>,
    taps: Vec<f64>,
}

impl FixedDesign {
    pub fn build(points: &[f64], weights: Option<&[f64]>, spec: &MollifierSpec) -> Result<Self> {
        let lattice = GridSmoother::build(points, &[], 0, weights, spec)?;
        let d = spec.dim;
        let k = 1 << d;
        let n = points.len() / d;
        let mut cells = Vec::with_capacity(n);
        let mut fracs = Vec::with_capacity(n);
        for p in points.chunks_exact(d) {
            let (c, f, _) = lattice.stencil(p).expect("design points lie inside their own lattice");
            let mut cu = [0u32; 4];
            for j in 0..k {
                cu[j] = c[j] as u32;
            }
            cells.push(cu);
            fracs.push(f);
        }
        let den_at = cells
            .iter()
            .zip(&fracs)
            .map(|(c, f)| (0..k).map(|j| f[j] * lattice.den[c[j] as usize]).sum())
            .collect();
        let taps = kernel_taps(spec, lattice.spacing);
        Ok(Self {
            lattice,
            weights: weights.map(|w| w.to_vec()),
            cells,
            fracs,
            den_at,
            taps,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    /// Smoothed kernel mass at design point `i`.
    pub fn mass_at_design(&self, i: usize) -> f64 {
        self.den_at[i]
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Writes the conditional means at every design point into `out`
    /// (`n x value_dim`, zeros where degenerate); returns the number of
    /// degenerate points.
    pub fn conditional_at_design(&self, m_values: &[f64], value_dim: usize, out: &mut [f64]) -> Result<usize> {
        let n = self.len();
        if m_values.len() != n * value_dim || out.len() != n * value_dim {
            return Err(Error::Dimension {
                expected: n * value_dim,
                got: m_values.len().min(out.len()),
            });
        }
        let g = &self.lattice;
        let k = 1 << g.spec.dim;
        let n_cells = g.shape[0] * g.shape[1];
        let mut plane = vec![0.0; n_cells];
        for c in 0..value_dim {
            plane.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let w = self.weights.as_ref().map_or(1.0, |w| w[i]);
                let mv = m_values[i * value_dim + c];
                let (cl, fr) = (&self.cells[i], &self.fracs[i]);
                for j in 0..k {
                    plane[cl[j] as usize] += w * fr[j] * mv;
                }
            }
            smooth(&mut plane, g.shape, g.spec.dim, &self.taps);
            for i in 0..n {
                let den = self.den_at[i];
                let (cl, fr) = (&self.cells[i], &self.fracs[i]);
                out[i * value_dim + c] = if den < DENOM_FLOOR {
                    0.0
                } else {
                    (0..k).map(|j| fr[j] * plane[cl[j] as usize]).sum::<f64>() / den
                };
            }
        }
        Ok(self.den_at.iter().filter(|&&d| d < DENOM_FLOOR).count())
    }
}

/// Sampled kernel `g_b(j spacing)` times `spacing` (one axis of a separable
/// product; the Epanechnikov product kernel is used for d = 2 on the lattice).
fn kernel_taps(spec: &MollifierSpec, spacing: f64) -> Vec<f64> {
    let b = spec.bandwidth;
    let r = (spec.radius() * b / spacing).ceil() as isize;
    let one_d = MollifierSpec { dim: 1, ..*spec };
    let mut taps: Vec<f64> = (-r..=r).map(|j| one_d.eval(&[j as f64 * spacing]) * spacing).collect();
    // unit mass on the lattice keeps the density estimate normalised
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s * spacing);
    taps
}

fn smooth(field: &mut [f64], shape: [usize; 2], dim: usize, taps: &[f64]) {
    let r = taps.len() / 2;
    let conv_line = |line: &[f64], out: &mut [f64]| {
        let n = line.len();
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += line[j] * taps[j + r - i];
            }
            *o = acc;
        }
    };
    if dim == 1 {
        let src = field.to_vec();
        conv_line(&src, field);
        return;
    }
    let (n0, n1) = (shape[0], shape[1]);
    // along axis 1 (contiguous rows)
    let mut buf = vec![0.0; n1];
    for row in field.chunks_exact_mut(n1) {
        buf.copy_from_slice(row);
        conv_line(&buf, row);
    }
    // along axis 0
    let mut col = vec![0.0; n0];
    let mut out = vec![0.0; n0];
    for c in 0..n1 {
        for a in 0..n0 {
            col[a] = field[a * n1 + c];
        }
        conv_line(&col, &mut out);
        for a in 0..n0 {
            field[a * n1 + c] = out[a];
        }
    }
}

/// Multinomial bootstrap: for each replicate, draws `n` indices with
/// replacement, turns them into integer counts and hands the counts to `stat`
/// as weights. Returns the per-component standard deviation over replicates.
pub fn bootstrap_se(n: usize, replicates: usize, seed: u64, stat: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Vec<f64> {
    let draws: Vec<Vec<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r, Channel::Bootstrap);
            let mut counts = vec![0.0; n];
            for _ in 0..n {
                counts[rng.gen_range(0..n)] += 1.0;
            }
            stat(&counts)
        })
        .collect();
    let k = draws.first().map_or(0, |d| d.len());
    let b = replicates as f64;
    (0..k)
        .map(|c| {
            let mean = draws.iter().map(|d| d[c]).sum::<f64>() / b;
            (draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / (b - 1.0).max(1.0)).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        (0..n.div_ceil(8) as u64).flat_map(|p| rng_stream(seed, p, 0, Channel::Init)).take(n).collect()
    }

    #[test]
    fn single_point_gives_the_kernel() {
        let spec = MollifierSpec::gaussian(1.0, 1);
        let q = [-1.0, 0.0, 0.5];
        let out = kde(&[0.0], None, &spec, &q).unwrap();
        for (x, v) in q.iter().zip(out) {
            assert_abs_diff_eq!(v, (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-15);
        }
        let two = kde(&[-0.7, 0.7], None, &MollifierSpec::gaussian(0.3, 1), &[0.0]).unwrap();
        assert_abs_diff_eq!(two[0], MollifierSpec::gaussian(0.3, 1).eval(&[0.7]), epsilon = 1e-15);
    }

    #[test]
    fn mollifiers_have_unit_mass() {
        for spec in [
            MollifierSpec::gaussian(0.4, 1),
            MollifierSpec::epanechnikov(0.4, 1),
            MollifierSpec::gaussian(0.4, 2),
            MollifierSpec::epanechnikov(0.4, 2),
        ] {
            let h = 0.01;
            let m: f64 = if spec.dim == 1 {
                (-300..=300).map(|i| spec.eval(&[i as f64 * h]) * h).sum()
            } else {
                let mut s = 0.0;
                for i in -300..=300 {
                    for j in -300..=300 {
                        s += spec.eval(&[i as f64 * h, j as f64 * h]) * h * h;
                    }
                }
                s
            };
            assert_abs_diff_eq!(m, 1.0, epsilon = 2e-3);
        }
    }

    #[test]
    fn kde_of_normal_sample() {
        let xs = normals(5, 100_000);
        let spec = MollifierSpec::gaussian(0.1, 1);
        let h = 0.02;
        let q: Vec<f64> = (0..500).map(|i| -5.0 + (i as f64 + 0.5) * h).collect();
        let grid = GridSmoother::build(&xs, &[], 0, None, &spec).unwrap();
        let l1: f64 = q
            .iter()
            .map(|&x| (grid.density_at(&[x]) - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs() * h)
            .sum();
        assert!(l1 <= 0.03, "{l1}");
        let mass: f64 = q.iter().map(|&x| grid.density_at(&[x]) * h).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn tiny_bandwidth_rejected() {
        assert!(matches!(kde(&[0.0, 1.0], None, &MollifierSpec::gaussian(1e-20, 1), &[0.0]), Err(Error::Bandwidth { .. })));
    }

    #[test]
    fn nw_special_cases() {
        let spec = MollifierSpec::gaussian(0.2, 1);
        let xs = [0.3; 5];
        let ys = [1.0, 2.0, 3.0, 4.0, 5.0];
        let w = [1.0, 1.0, 1.0, 1.0, 6.0];
        let est = nw_conditional(&xs, &ys, 1, Some(&w), &spec, &[0.3]).unwrap();
        assert_abs_diff_eq!(est.values[0], 40.0 / 10.0, epsilon = 1e-13);

        let c = [2.5; 5];
        let est = nw_conditional(&[0.0, 0.1, 0.4, 1.0, 2.0], &c, 1, None, &spec, &[-1.0, 0.0, 0.7, 3.0]).unwrap();
        assert!(est.values.iter().all(|v| (v - 2.5).abs() < 1e-14));

        // two well separated clusters
        let xs: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let ys: Vec<f64> = xs.clone();
        let spec = MollifierSpec::gaussian(0.05, 1);
        let est = nw_conditional(&xs, &ys, 1, None, &spec, &[-1.0]).unwrap();
        // brute force: the far cluster carries weight exp(-2/0.05^2) relative
        let far = (-0.5f64 * (2.0 / 0.05f64).powi(2)).exp();
        let exact = (-1.0 + far) / (1.0 + far);
        assert_abs_diff_eq!(est.values[0], exact, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_denominator_is_zero_and_flagged() {
        let spec = MollifierSpec::epanechnikov(0.1, 1);
        let est = nw_conditional(&[0.0], &[3.0], 1, None, &spec, &[5.0, 0.0]).unwrap();
        assert_eq!(est.values, vec![0.0, 3.0]);
        assert_eq!(est.degenerate, vec![true, false]);
    }

    #[test]
    fn binned_cases() {
        let xs = [0.1, 0.2, 0.9];
        let m = [1.0, 2.0, 6.0];
        let one = binned_conditional(&xs, &m, 1, None, 1, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(one.values[0], 3.0, epsilon = 1e-15);

        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let est = binned_conditional(&xs, &xs, 1, None, 50, (0.0, 1.0)).unwrap();
        for (q, v) in est.query.iter().zip(&est.values) {
            assert_abs_diff_eq!(q, v, epsilon = 1e-12);
        }

        let sparse = binned_conditional(&[0.05, 0.95], &[1.0, 2.0], 1, None, 10, (0.0, 1.0)).unwrap();
        assert_eq!(sparse.values[1], 1.0);
        assert_eq!(sparse.values[8], 2.0);
        assert!(sparse.degenerate[1] && !sparse.degenerate[0]);
    }

    #[test]
    fn binned_matches_nw_within_bootstrap_error() {
        // X ~ N(0,1), Y = sin(X) + 0.5 noise, E[Y|X] = sin X
        let n = 20_000;
        let xs = normals(11, n);
        let noise = normals(12, n);
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x.sin() + 0.5 * e).collect();
        let width = 0.2;
        let range = (-1.5, 1.5);
        let binned = binned_conditional(&xs, &ys, 1, None, 15, range).unwrap();
        // box-like bins vs. Epanechnikov NW with matching half-width
        let spec = MollifierSpec::epanechnikov(width / 2.0 * 3f64.sqrt(), 1);
        let nw = nw_conditional(&xs, &ys, 1, None, &spec, &binned.query).unwrap();
        let se = bootstrap_se(n, 100, 3, |w| nw_conditional(&xs, &ys, 1, Some(w), &spec, &binned.query).unwrap().values);
        // edge bins also collect the clamped tails
        for i in 1..binned.len() - 1 {
            assert!((binned.values[i] - nw.values[i]).abs() <= 3.0 * se[i] + 1e-3, "bin {i}: {} vs {} (se {})", binned.values[i], nw.values[i], se[i]);
        }
    }

    #[test]
    fn grid_smoother_matches_direct_sums() {
        let n = 3_000;
        let xs = normals(21, n);
        let ys: Vec<f64> = xs.iter().map(|x| x.tanh()).collect();
        for spec in [MollifierSpec::gaussian(0.3, 1), MollifierSpec::epanechnikov(0.5, 1)] {
            let grid = GridSmoother::build(&xs, &ys, 1, None, &spec).unwrap();
            let q: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
            let direct_d = kde(&xs, None, &spec, &q).unwrap();
            let direct = nw_conditional(&xs, &ys, 1, None, &spec, &q).unwrap();
            let fast = grid.conditional(&q);
            for i in 0..q.len() {
                assert_abs_diff_eq!(grid.density_at(&[q[i]]), direct_d[i], epsilon = 3e-3 * direct_d[i].max(0.05));
                assert_abs_diff_eq!(fast.values[i], direct.values[i], epsilon = 3e-3);
            }
        }
    }

    #[test]
    fn grid_smoother_two_dimensions() {
        let n = 4_000;
        let a = normals(31, n);
        let b = normals(32, n);
        let pts: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| [*x, 0.5 * y]).collect();
        let spec = MollifierSpec::gaussian(0.4, 2);
        let grid = GridSmoother::build(&pts, &[], 0, None, &spec).unwrap();
        for q in [[0.0, 0.0], [0.7, -0.3], [-1.2, 0.4]] {
            let direct = kde(&pts, None, &spec, &q).unwrap()[0];
            assert_abs_diff_eq!(grid.density_at(&q), direct, epsilon = 5e-3 * direct.max(0.05));
        }
    }

    #[test]
    fn silverman_rule() {
        let xs = normals(41, 100_000);
        assert_abs_diff_eq!(silverman_bandwidth(&xs), 1.06 * 1e5f64.powf(-0.2), epsilon = 0.01);
    }

    proptest! {
        #[test]
        fn nw_is_a_convex_combination(
            data in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, 0.01f64..5.0), 1..40),
            q in -4.0f64..4.0,
            b in 0.05f64..2.0,
        ) {
            let xs: Vec<f64> = data.iter().map(|d| d.0).collect();
            let ys: Vec<f64> = data.iter().map(|d| d.1).collect();
            let ws: Vec<f64> = data.iter().map(|d| d.2).collect();
            let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
            let spec = MollifierSpec::gaussian(b, 1);
            let est = nw_conditional(&xs, &ys, 1, Some(&ws), &spec, &[q]).unwrap();
            if !est.degenerate[0] {
                prop_assert!(est.values[0] >= lo - 1e-12 && est.values[0] <= hi + 1e-12);
            }
            let grid = GridSmoother::build(&xs, &ys, 1, Some(&ws), &spec).unwrap();
            let mut out = [0.0];
            if grid.conditional_at(&[q], &mut out).is_some() {
                prop_assert!(out[0] >= lo - 1e-12 && out[0] <= hi + 1e-12);
            }
        }

        #[test]
        fn scaling_weights_changes_nothing(
            data in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, 0.01f64..5.0), 1..30),
            scale in 0.001f64..1000.0,
        ) {
            let xs: Vec<f64> = data.iter().map(|d| d.0).collect();
            let ys: Vec<f64> = data.iter().map(|d| d.1).collect();
            let ws: Vec<f64> = data.iter().map(|d| d.2).collect();
            let ws2: Vec<f64> = ws.iter().map(|w| w * scale).collect();
            let spec = MollifierSpec::gaussian(0.5, 1);
            let q = [-1.0, 0.0, 1.5];
            let a = nw_conditional(&xs, &ys, 1, Some(&ws), &spec, &q).unwrap();
            let b = nw_conditional(&xs, &ys, 1, Some(&ws2), &spec, &q).unwrap();
            let ka = kde(&xs, Some(&ws), &spec, &q).unwrap();
            let kb = kde(&xs, Some(&ws2), &spec, &q).unwrap();
            for i in 0..3 {
                prop_assert!((a.values[i] - b.values[i]).abs() <= 1e-12 * (1.0 + a.values[i].abs()));
                prop_assert!((ka[i] - kb[i]).abs() <= 1e-12 * (1.0 + ka[i].abs()));
            }
        }
    }
    #[test]
    fn fixed_design_reproduces_grid_smoother() {
        for d in [1usize, 2] {
            let n = 3000;
            let pts: Vec<f64> = (0..n * d).map(|i| ((i as f64 * 0.7548776662) % 1.0 - 0.5) * 4.0).collect();
            let m: Vec<f64> = pts.chunks(d).flat_map(|p| [p[0].sin(), p[d - 1].cos()]).collect();
            let w: Vec<f64> = (0..n).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
            let spec = MollifierSpec::gaussian(0.3, d);
            let fd = FixedDesign::build(&pts, Some(&w), &spec).unwrap();
            let mut out = vec![0.0; 2 * n];
            assert_eq!(fd.conditional_at_design(&m, 2, &mut out).unwrap(), 0);
            let g = GridSmoother::build(&pts, &m, 2, Some(&w), &spec).unwrap();
            let mut e = [0.0; 2];
            for (i, p) in pts.chunks(d).enumerate() {
                g.conditional_at(p, &mut e).unwrap();
                assert_eq!(e, [out[2 * i], out[2 * i + 1]]);
            }
        }
    }

}
