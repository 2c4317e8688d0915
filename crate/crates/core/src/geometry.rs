//! Axis-aligned ellipsoids, diagonal Gaussians and the quantile-set bridge
//! between them.
//!
//! A nodule with center `c` and radii `r` is associated with the diagonal
//! Gaussian `N(c, diag(r² / Q))`, where `Q` is the `q`-quantile of the χ²
//! distribution with three degrees of freedom. The ellipsoid is then exactly
//! the set holding probability `q` under that Gaussian, and the reverse map
//! `r = √(σ² · Q)` recovers the nodule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates in (z, y, x) order, millimetres.
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub radii: Vec3,
}

impl Ellipsoid {
    pub fn new(center: Vec3, radii: Vec3) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite center {center:?}")));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Domain(format!("radii must be positive, got {radii:?}")));
        }
        Ok(Ellipsoid { center, radii })
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        Self::new(center, [radius; 3])
    }

    /// Inside test: `Σ ((p - c) / r)² ≤ 1`.
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            s += d * d;
        }
        s <= 1.0
    }

    /// Axis-aligned bounding box as (min corner, max corner).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            lo[i] = self.center[i] - self.radii[i];
            hi[i] = self.center[i] + self.radii[i];
        }
        (lo, hi)
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

/// Diagonal-covariance 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub mean: Vec3,
    pub variances: Vec3,
}

impl GaussianComponent {
    pub fn new(mean: Vec3, variances: Vec3) -> Result<Self> {
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain(format!("non-finite mean {mean:?}")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!("variances must be positive, got {variances:?}")));
        }
        Ok(GaussianComponent { mean, variances })
    }
}

/// Euclidean distance between two points.
#[inline]
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Normalized-separation overlap test, `Σ (Δc_i / (ra_i + rb_i))² ≤ 1`.
///
/// Exact for spheres; tangency counts as overlap.
pub fn overlaps(a: &Ellipsoid, b: &Ellipsoid) -> bool {
    let mut s = 0.0;
    for i in 0..3 {
        let d = (a.center[i] - b.center[i]) / (a.radii[i] + b.radii[i]);
        s += d * d;
    }
    s <= 1.0
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `P(χ²₃ ≤ x)`.
///
/// Closed form `erf(√(x/2)) − √(2x/π)·e^(−x/2)`; below `x = 0.5` the two terms
/// cancel badly, so the lower incomplete gamma series is used there.
pub fn chi2_3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if x < 0.5 {
        // P(3/2, z) = z^{3/2} e^{-z} Σ z^n / Γ(5/2 + n)
        let z = 0.5 * x;
        let mut term = 4.0 / (3.0 * std::f64::consts::PI.sqrt());
        let mut sum = term;
        let mut a = 2.5;
        for _ in 0..60 {
            term *= z / a;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            a += 1.0;
        }
        return z * z.sqrt() * (-z).exp() * sum;
    }
    libm::erf((0.5 * x).sqrt()) - SQRT_2_OVER_PI * x.sqrt() * (-0.5 * x).exp()
}

/// Inverse of [`chi2_3_cdf`] by bisection.
pub fn chi2_3_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {q}")));
    }
    let mut lo = 0.0_f64;
    let mut hi = 4.0_f64;
    while chi2_3_cdf(hi) < q {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_3_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Covariance scale `1 / chi2_3_quantile(q)` mapping squared radii to variances.
pub fn quantile_scale(q: f64) -> Result<f64> {
    Ok(1.0 / chi2_3_quantile(q)?)
}

/// Gaussian whose `q`-probability ellipsoid is `n`.
pub fn nodule_to_gaussian(n: &Ellipsoid, q: f64) -> Result<GaussianComponent> {
    let quantile = chi2_3_quantile(q)?;
    let variances = n.radii.map(|r| r * r / quantile);
    Ok(GaussianComponent {
        mean: n.center,
        variances,
    })
}

/// The `q`-probability ellipsoid of `g`; inverse of [`nodule_to_gaussian`].
pub fn gaussian_to_nodule(g: &GaussianComponent, q: f64) -> Result<Ellipsoid> {
    let quantile = chi2_3_quantile(q)?;
    let radii = g.variances.map(|v| (v * quantile).sqrt());
    Ellipsoid::new(g.mean, radii)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    // scipy.stats.chi2.ppf(0.5, 3)
    const CHI2_3_MEDIAN: f64 = 2.365_973_884_375_337_7;

    /// P(χ²₃ ≤ x) by composite Simpson on the smooth integrand obtained
    /// with x = t²: ∫₀^√x 2t² e^{-t²/2} / √(2π) dt.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let upper = x.sqrt();
        let n = 20_000;
        let h = upper / n as f64;
        let f = |t: f64| 2.0 * t * t * (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(0.0) + f(upper);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[1e-4, 0.1, 0.49, 0.5, 0.51, 1.0, 2.366, 5.0, 12.0, 30.0] {
            assert_abs_diff_eq!(chi2_3_cdf(x), cdf_by_quadrature(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn median_quantile() {
        let q = chi2_3_quantile(0.5).unwrap();
        assert_abs_diff_eq!(q, CHI2_3_MEDIAN, epsilon = 1e-10);
        assert_abs_diff_eq!(cdf_by_quadrature(q), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn median_quantile_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = chi2_3_quantile(0.5).unwrap();
        let n = 1_000_000;
        let mut inside = 0usize;
        for _ in 0..n {
            let s: f64 = (0..3)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * z
                })
                .sum();
            if s <= q {
                inside += 1;
            }
        }
        // binomial standard error at n = 1e6 is 5e-4
        assert_abs_diff_eq!(inside as f64 / n as f64, 0.5, epsilon = 2.5e-3);
    }

    #[test]
    fn quantile_inverts_forward_map() {
        let p = chi2_3_cdf(1.0);
        assert_abs_diff_eq!(chi2_3_quantile(p).unwrap(), 1.0, epsilon = 1e-10);
        assert!(chi2_3_quantile(1e-12).unwrap() < 1e-6);
        for &q in &[1e-6, 0.01, 0.3, 0.5, 0.9, 0.999, 1.0 - 1e-9] {
            assert_abs_diff_eq!(chi2_3_cdf(chi2_3_quantile(q).unwrap()), q, epsilon = 1e-8);
        }
    }

    #[test]
    fn quantile_domain() {
        for q in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(chi2_3_quantile(q), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn unit_sphere_gaussian() {
        let n = Ellipsoid::sphere([0.0; 3], 1.0).unwrap();
        let g = nodule_to_gaussian(&n, 0.5).unwrap();
        for v in g.variances {
            assert_abs_diff_eq!(v, 0.422_658_934_066_814_15, epsilon = 1e-10);
        }
        let big = nodule_to_gaussian(&Ellipsoid::sphere([0.0; 3], 2.0).unwrap(), 0.3).unwrap();
        let small = nodule_to_gaussian(&n, 0.3).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(big.variances[i], 4.0 * small.variances[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_to_nodule_values() {
        let g = GaussianComponent::new([0.0; 3], [1.0; 3]).unwrap();
        let n = gaussian_to_nodule(&g, 0.5).unwrap();
        for r in n.radii {
            assert_abs_diff_eq!(r, 1.538_172_254_455_052_2, epsilon = 1e-10);
        }
        let g2 = GaussianComponent::new([0.0; 3], [2.0; 3]).unwrap();
        let n2 = gaussian_to_nodule(&g2, 0.5).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(n2.radii[i], n.radii[i] * 2f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_holds_q_of_its_ellipsoid() {
        let n = Ellipsoid::new([3.0, -2.0, 10.0], [2.0, 5.0, 1.5]).unwrap();
        let q = 0.5;
        let g = nodule_to_gaussian(&n, q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let total = 1_000_000;
        let mut inside = 0usize;
        for _ in 0..total {
            let mut p = [0.0; 3];
            for i in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                p[i] = g.mean[i] + z * g.variances[i].sqrt();
            }
            if n.contains(p) {
                inside += 1;
            }
        }
        assert_abs_diff_eq!(inside as f64 / total as f64, q, epsilon = 0.01);
    }

    #[test]
    fn overlap_cases() {
        let a = Ellipsoid::sphere([0.0; 3], 1.0).unwrap();
        let b = Ellipsoid::sphere([2.0, 0.0, 0.0], 1.0).unwrap();
        let c = Ellipsoid::sphere([2.001, 0.0, 0.0], 1.0).unwrap();
        assert!(overlaps(&a, &a));
        assert!(overlaps(&a, &b));
        assert!(!overlaps(&a, &c));
    }

    #[test]
    fn distance_cases() {
        assert_eq!(distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 0.0);
        assert_eq!(distance([0.0; 3], [3.0, 4.0, 0.0]), 5.0);
        assert_eq!(distance([0.0; 3], [3.0, 4.0, 0.0]), distance([3.0, 4.0, 0.0], [0.0; 3]));
    }

    #[test]
    fn rejects_bad_radii() {
        assert!(Ellipsoid::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(Ellipsoid::new([0.0; 3], [1.0, f64::INFINITY, 1.0]).is_err());
        assert!(Ellipsoid::new([f64::NAN, 0.0, 0.0], [1.0; 3]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn ellipsoid() -> impl Strategy<Value = Ellipsoid> {
            (
                prop::array::uniform3(-200.0..200.0f64),
                prop::array::uniform3(0.1..40.0f64),
            )
                .prop_map(|(c, r)| Ellipsoid::new(c, r).unwrap())
        }

        proptest! {
            #[test]
            fn quantile_is_increasing(a in 1e-6..0.999_999f64, b in 1e-6..0.999_999f64) {
                prop_assume!(a < b - 1e-9);
                prop_assert!(chi2_3_quantile(a).unwrap() < chi2_3_quantile(b).unwrap());
            }

            #[test]
            fn nodule_gaussian_round_trip(n in ellipsoid(), q in 0.01..0.99f64) {
                let back = gaussian_to_nodule(&nodule_to_gaussian(&n, q).unwrap(), q).unwrap();
                for i in 0..3 {
                    prop_assert!((back.center[i] - n.center[i]).abs() <= 1e-9);
                    prop_assert!((back.radii[i] - n.radii[i]).abs() <= 1e-9);
                }
            }

            #[test]
            fn overlap_symmetric_reflexive(a in ellipsoid(), b in ellipsoid()) {
                prop_assert!(overlaps(&a, &a));
                prop_assert_eq!(overlaps(&a, &b), overlaps(&b, &a));
            }

            #[test]
            fn sphere_overlap_is_distance_test(
                ca in prop::array::uniform3(-20.0..20.0f64),
                cb in prop::array::uniform3(-20.0..20.0f64),
                ra in 0.5..15.0f64,
                rb in 0.5..15.0f64,
            ) {
                let a = Ellipsoid::sphere(ca, ra).unwrap();
                let b = Ellipsoid::sphere(cb, rb).unwrap();
                let d = distance(ca, cb);
                // away from the rounding band the two tests must agree
                prop_assume!((d - (ra + rb)).abs() > 1e-9);
                prop_assert_eq!(overlaps(&a, &b), d <= ra + rb);
            }
        }
    }
}
