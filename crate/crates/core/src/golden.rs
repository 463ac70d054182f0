//! Golden-section search for convex functions of one variable.

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimiser and minimum found by [`golden_section`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub arg: f64,
    pub value: f64,
}

/// Minimises a unimodal `f` over `[lo, hi]` until the bracket is narrower
/// than `tol`. The endpoints are compared against the interior estimate, so a
/// minimiser sitting on the boundary is returned exactly.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Minimum {
    assert!(lo <= hi, "empty bracket [{lo}, {hi}]");
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = Minimum { arg: mid, value: f(mid) };
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best.value {
            best = Minimum { arg: x, value: v };
        }
    }
    for x in [lo, hi] {
        let v = f(x);
        if v < best.value {
            best = Minimum { arg: x, value: v };
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_interior() {
        let m = golden_section(|x| (x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-10);
        assert!((m.arg - 1.3).abs() < 1e-7);
        assert!((m.value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_minimiser() {
        let m = golden_section(|x| x + 1.0, 0.0, 4.0, 1e-8);
        assert_eq!(m.arg, 0.0);
        assert_eq!(m.value, 1.0);
        let m = golden_section(|x| -x, 0.0, 4.0, 1e-8);
        assert_eq!(m.arg, 4.0);
    }

    #[test]
    fn piecewise_linear_convex() {
        let f = |x: f64| (x - 0.25).abs().max(2.0 * (x - 0.5));
        let m = golden_section(f, 0.0, 3.0, 1e-9);
        assert!((m.arg - 0.25).abs() < 1e-8);
    }

    #[test]
    fn degenerate_bracket() {
        let m = golden_section(|x| x * x, 2.0, 2.0, 1e-8);
        assert_eq!(m.arg, 2.0);
        assert_eq!(m.value, 4.0);
    }
}
