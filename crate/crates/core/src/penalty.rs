//! The dual-variable transform `iota(alpha) = log cosh(alpha)`.
//!
//! The transport multiplier of the dual problem lives on `[0, inf)`. Writing it
//! as `iota(alpha)` lets the sampler run on all of `R^{d+1}`. Besides the value
//! and derivative, this module exposes the constants that describe how `iota`
//! enters the drift: the dissipativity pair `(a_iota, b_iota)` and the
//! Lipschitz bounds of `iota'` and `iota * iota'`.

use std::f64::consts::LN_2;
use std::sync::OnceLock;

/// Half-width of the scan window used to derive `b_iota` and `Ltilde_iota`.
pub const SCAN_HALF_WIDTH: f64 = 20.0;
/// Step of the dense scan.
pub const SCAN_STEP: f64 = 1e-4;
/// Multiplicative safety margin applied to scan suprema.
pub const SCAN_MARGIN: f64 = 1.1;

/// `log cosh(alpha)`, evaluated without overflow.
///
/// Uses `|a| + log(1 + e^{-2|a|}) - log 2`, which is exact to rounding for any
/// finite input and never forms `cosh` itself.
#[inline]
pub fn iota(alpha: f64) -> f64 {
    let a = alpha.abs();
    let v = a + (-2.0 * a).exp().ln_1p() - LN_2;
    // rounding can push the result a hair below zero near the origin
    v.max(0.0)
}

/// `iota'(alpha) = tanh(alpha)`.
#[inline]
pub fn iota_prime(alpha: f64) -> f64 {
    alpha.tanh()
}

/// `iota''(alpha) = sech^2(alpha)`.
#[inline]
pub fn iota_second(alpha: f64) -> f64 {
    let t = alpha.tanh();
    1.0 - t * t
}

/// `iota(alpha) * iota'(alpha)`, the alpha-part of the regulariser gradient.
#[inline]
pub fn iota_iota_prime(alpha: f64) -> f64 {
    iota(alpha) * iota_prime(alpha)
}

/// Constants describing `iota` as it enters the drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConstants {
    /// Slope in `alpha * iota * iota' >= a_iota * alpha^2 - b_iota`.
    pub a_iota: f64,
    /// Offset in the same inequality.
    pub b_iota: f64,
    /// Lipschitz constant of `iota'`.
    pub l_iota: f64,
    /// Uniform bound on `|iota'|`.
    pub m_iota: f64,
    /// Lipschitz constant of `iota * iota'`.
    pub ltilde_iota: f64,
}

/// Returns the cached penalty constants.
///
/// `a_iota = 1/2` and `L_iota = M_iota = 1` are exact. `b_iota` is the
/// supremum of `alpha^2 / 2 - alpha * iota * iota'` over a dense scan of
/// `[-20, 20]` (step `1e-4`) inflated by 10%; outside that window the
/// expression tends to `-inf`. `Ltilde_iota` is the scanned supremum of
/// `|d(iota * iota')/d alpha| = |tanh^2 + log cosh * sech^2|`, with the same margin.
pub fn dissipativity_constants() -> PenaltyConstants {
    static CACHE: OnceLock<PenaltyConstants> = OnceLock::new();
    *CACHE.get_or_init(scan_constants)
}

fn scan_constants() -> PenaltyConstants {
    let a_iota = 0.5;
    let steps = (2.0 * SCAN_HALF_WIDTH / SCAN_STEP).round() as i64;
    let mut sup_gap = f64::NEG_INFINITY;
    let mut sup_slope = 0.0_f64;
    for k in 0..=steps {
        let alpha = -SCAN_HALF_WIDTH + k as f64 * SCAN_STEP;
        let gap = a_iota * alpha * alpha - alpha * iota_iota_prime(alpha);
        sup_gap = sup_gap.max(gap);
        let t = iota_prime(alpha);
        let slope = t * t + iota(alpha) * iota_second(alpha);
        sup_slope = sup_slope.max(slope.abs());
    }
    PenaltyConstants {
        a_iota,
        b_iota: SCAN_MARGIN * sup_gap.max(0.0),
        l_iota: 1.0,
        m_iota: 1.0,
        ltilde_iota: SCAN_MARGIN * sup_slope,
    }
}

/// Finds `alpha >= 0` with `iota(alpha) = target` by bisection.
///
/// Used to map a multiplier `a >= 0` back to the unconstrained coordinate.
pub fn iota_inverse(target: f64) -> Option<f64> {
    if !target.is_finite() || target < 0.0 {
        return None;
    }
    // iota(alpha) >= alpha - log 2, so alpha = target + log 2 + 1 brackets the root
    let (mut lo, mut hi) = (0.0_f64, target + LN_2 + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if iota(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iota_examples() {
        assert_eq!(iota(0.0), 0.0);
        assert!((iota(10.0) - (10.0 - LN_2)).abs() < 1e-8);
        assert!((iota(10.0) - 9.306_852_821_501_208).abs() < 1e-14);
        assert_eq!(iota(-3.7), iota(3.7));
        // far tail stays finite and exact
        assert_eq!(iota(1e6), 1e6 - LN_2);
        assert!((iota(40.0) - (40.0 - LN_2)).abs() < 1e-14);
    }

    #[test]
    fn iota_prime_examples() {
        assert_eq!(iota_prime(0.0), 0.0);
        let mut prev = 0.0;
        for k in 1..60 {
            let v = iota_prime(k as f64 * 0.5);
            assert!(v >= prev && v <= 1.0);
            prev = v;
        }
        assert!((prev - 1.0).abs() < 1e-12);
        let h = 1e-5;
        for &a in &[-2.0, -0.5, 0.3, 1.7] {
            let fd = (iota(a + h) - iota(a - h)) / (2.0 * h);
            assert!((fd - iota_prime(a)).abs() < 1e-6, "alpha={a}");
        }
    }

    #[test]
    fn scanned_constants_match_frozen_values() {
        let c = dissipativity_constants();
        assert_eq!(c.a_iota, 0.5);
        assert_eq!((c.l_iota, c.m_iota), (1.0, 1.0));
        // scan supremum 0.173264563852 at |alpha| ~ 0.9206 (independent numpy scan)
        assert!((c.b_iota / SCAN_MARGIN - 0.173_264_563_852).abs() < 1e-9);
        // sup |tanh^2 + log cosh sech^2| = 1.024893534 at |alpha| ~ 2.18
        assert!((c.ltilde_iota / SCAN_MARGIN - 1.024_893_534_1).abs() < 1e-8);
        assert!(0.0 >= -c.b_iota);
    }

    #[test]
    fn even_odd_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-30.0..30.0);
            assert!(iota(a) >= 0.0);
            assert_eq!(iota(a), iota(-a));
            assert_eq!(iota_prime(a), -iota_prime(-a));
        }
    }

    #[test]
    fn surjective_onto_bounded_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let c: f64 = rng.random_range(0.0..20.0);
            let a = iota_inverse(c).unwrap();
            assert!((iota(a) - c).abs() < 1e-10, "c={c}");
        }
        assert!(iota_inverse(-1.0).is_none());
    }

    #[test]
    fn dissipativity_on_scan_grid() {
        let c = dissipativity_constants();
        let steps = 400_000;
        for k in 0..=steps {
            let a = -SCAN_HALF_WIDTH + k as f64 * SCAN_STEP;
            assert!(a * iota_iota_prime(a) >= c.a_iota * a * a - c.b_iota);
        }
        // and well beyond the scan window
        for &a in &[-1e3, -50.0, 35.0, 1e4] {
            assert!(a * iota_iota_prime(a) >= c.a_iota * a * a - c.b_iota);
        }
    }

    #[test]
    fn iota_iota_prime_is_lipschitz() {
        let c = dissipativity_constants();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let a1: f64 = rng.random_range(-30.0..30.0);
            let a2: f64 = rng.random_range(-30.0..30.0);
            let lhs = (iota_iota_prime(a1) - iota_iota_prime(a2)).abs();
            assert!(lhs <= c.ltilde_iota * (a1 - a2).abs() + 1e-12);
        }
    }
}
