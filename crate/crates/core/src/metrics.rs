//! One-dimensional Wasserstein-1 distances.

use crate::grid::DensityField;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// `W1` between two empirical measures: `int_0^1 |F_a^-1(p) - F_b^-1(p)| dp`,
/// exact for step quantile functions (any sample sizes).
pub fn w1_samples(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64;
    }
    // walk the merged quantile breakpoints i/na and j/nb
    let (mut i, mut j) = (0usize, 0usize);
    let mut p = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let pa = (i + 1) as f64 / na as f64;
        let pb = (j + 1) as f64 / nb as f64;
        let next = pa.min(pb);
        acc += (next - p) * (a[i] - b[j]).abs();
        p = next;
        if pa <= next {
            i += 1;
        }
        if pb <= next {
            j += 1;
        }
    }
    acc
}

/// `W1` between two cell densities on the same grid: `L1` distance of CDFs.
pub fn w1_densities(a: &DensityField, b: &DensityField) -> f64 {
    let h = a.h();
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut acc = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        // CDFs are linear inside a cell; integrate |linear| exactly
        let d0 = fa - fb;
        fa += x * h;
        fb += y * h;
        acc += abs_linear_integral(d0, fa - fb, h);
    }
    acc
}

/// `int_0^len |l(s)| ds` for `l` linear from `v0` to `v1`.
fn abs_linear_integral(v0: f64, v1: f64, len: f64) -> f64 {
    if v0 * v1 >= 0.0 {
        0.5 * len * (v0.abs() + v1.abs())
    } else {
        0.5 * len * (v0 * v0 + v1 * v1) / (v0.abs() + v1.abs())
    }
}

/// `W1` between an empirical measure and a piecewise-constant density,
/// exact: the empirical CDF is a step function and the density's CDF is
/// piecewise linear. The density is renormalised to unit mass.
pub fn w1_samples_density(samples: &[f64], density: &DensityField) -> f64 {
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let h = density.h();
    let left = -density.grid.half_width;
    let mass: f64 = density.values.iter().sum::<f64>() * h;
    let edges: Vec<f64> = (0..=density.values.len()).map(|i| left + i as f64 * h).collect();
    let mut cdf_at_edge = Vec::with_capacity(edges.len());
    let mut c = 0.0;
    cdf_at_edge.push(0.0);
    for v in &density.values {
        c += v * h / mass;
        cdf_at_edge.push(c);
    }
    let cdf = |x: f64| -> f64 {
        if x <= left {
            return 0.0;
        }
        let s = (x - left) / h;
        let i = s.floor() as usize;
        if i >= density.values.len() {
            return 1.0;
        }
        cdf_at_edge[i] + (s - i as f64) * (cdf_at_edge[i + 1] - cdf_at_edge[i])
    };
    // breakpoints: all sample points and all cell edges
    let mut pts: Vec<f64> = xs.iter().copied().chain(edges.iter().copied()).collect();
    pts.sort_by(|a, b| a.total_cmp(b));
    let mut acc = 0.0;
    let mut k = 0usize; // samples <= current left breakpoint
    for w in pts.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        while k < xs.len() && xs[k] <= x0 {
            k += 1;
        }
        if x1 > x0 {
            let emp = k as f64 / n;
            acc += abs_linear_integral(cdf(x0) - emp, cdf(x1) - emp, x1 - x0);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn shifted_samples() {
        let a = [0.0, 1.0, 2.0];
        let b = [0.5, 1.5, 2.5];
        assert_abs_diff_eq!(w1_samples(&a, &b), 0.5, epsilon = 1e-15);
        // unequal sizes: {0} vs {0, 1} -> half the mass moves by 1
        assert_abs_diff_eq!(w1_samples(&[0.0], &[0.0, 1.0]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_density_vs_point() {
        let g = GridSpec::new(1.0, 100, 0.1, 1).unwrap();
        let u = DensityField::uniform(g, 0.5);
        // W1(U[-1,1], delta_0) = E|U| = 1/2
        assert_abs_diff_eq!(w1_samples_density(&[0.0], &u), 0.5, epsilon = 1e-12);
        // delta at 1: E|U - 1| = 1
        assert_abs_diff_eq!(w1_samples_density(&[1.0], &u), 1.0, epsilon = 1e-12);
        // outside the grid: E|U - 3| = 3
        assert_abs_diff_eq!(w1_samples_density(&[3.0], &u), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn density_shift() {
        let g = GridSpec::new(4.0, 80, 0.1, 1).unwrap();
        let mut a = vec![0.0; 80];
        let mut b = vec![0.0; 80];
        a[30] = 10.0;
        b[35] = 10.0;
        let a = DensityField::new(g, a).unwrap();
        let b = DensityField::new(g, b).unwrap();
        assert_abs_diff_eq!(w1_densities(&a, &b), 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn w1_is_a_metric_on_samples(
            a in prop::collection::vec(-5.0f64..5.0, 1..30),
            b in prop::collection::vec(-5.0f64..5.0, 1..30),
            c in prop::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let ab = w1_samples(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - w1_samples(&b, &a)).abs() < 1e-12);
            prop_assert!(w1_samples(&a, &a) < 1e-15);
            prop_assert!(ab <= w1_samples(&a, &c) + w1_samples(&c, &b) + 1e-12);
        }

        #[test]
        fn duplicated_samples_change_nothing(a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let aa: Vec<f64> = a.iter().chain(&a).copied().collect();
            prop_assert!((w1_samples(&a, &b) - w1_samples(&aa, &b)).abs() < 1e-12);
        }
    }
}
