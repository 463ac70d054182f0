//! Utility functions `U(theta, x)` and their growth constants.

use crate::grid::{BoxRegion, GridPoints, GridSpec};

/// Growth and regularity constants of a utility function.
///
/// * `|grad U(theta, x)| <= k_nabla (1 + |x|)^nu`
/// * `|grad U(theta1, x) - grad U(theta2, x)| <= l_nabla (1 + |x|)^nu |theta1 - theta2|`
/// * `|U(theta, x1) - U(theta, x2)| <= j_u (1 + |theta|)(1 + |x1| + |x2|)^chi |x1 - x2|`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthConstants {
    pub k_nabla: f64,
    pub l_nabla: f64,
    pub nu: u32,
    pub j_u: f64,
    pub chi: u32,
}

/// A utility function that is differentiable in its parameter.
///
/// Implementations must be pure: the same `(theta, x)` always yields the same
/// value, so that sampler runs are bit-reproducible.
pub trait UtilityModel: Send + Sync {
    /// Parameter dimension `d`.
    fn param_dim(&self) -> usize;

    /// Data dimension `m`.
    fn data_dim(&self) -> usize;

    fn value(&self, theta: &[f64], x: &[f64]) -> f64;

    /// Writes `grad_theta U(theta, x)` into `grad` (length `d`).
    fn gradient(&self, theta: &[f64], x: &[f64], grad: &mut [f64]);

    /// Value and gradient together; override when they share work.
    fn value_and_gradient(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> f64 {
        self.gradient(theta, x, grad);
        self.value(theta, x)
    }

    /// `U(theta, x_j)` at every point.
    fn values(&self, theta: &[f64], points: &GridPoints, values: &mut [f64]) {
        for (v, x) in values.iter_mut().zip(points.iter()) {
            *v = self.value(theta, x);
        }
    }

    /// Values and gradients at every point; `grads` is row-major `len x d`.
    /// Override to share work between neighbouring points.
    fn values_and_gradients(&self, theta: &[f64], points: &GridPoints, values: &mut [f64], grads: &mut [f64]) {
        let d = self.param_dim();
        for ((v, x), g) in values.iter_mut().zip(points.iter()).zip(grads.chunks_exact_mut(d)) {
            *v = self.value_and_gradient(theta, x, g);
        }
    }

    fn growth(&self) -> GrowthConstants;

    /// `max_{x in box} |U(0, x)|`.
    ///
    /// The default checks every corner plus a coarse interior grid of 9 points
    /// per axis. Models with closed forms should override it.
    fn max_abs_at_origin(&self, xi_box: &BoxRegion) -> f64 {
        let zero = vec![0.0; self.param_dim()];
        let mut best = xi_box
            .corners()
            .iter()
            .map(|c| self.value(&zero, c).abs())
            .fold(0.0_f64, f64::max);
        let m = xi_box.dim();
        let per_axis = 9usize;
        let total = per_axis.saturating_pow(m as u32);
        if total <= 1_000_000 {
            let mut x = vec![0.0; m];
            for flat in 0..total {
                let mut rem = flat;
                for k in (0..m).rev() {
                    let t = (rem % per_axis) as f64 / (per_axis - 1) as f64;
                    rem /= per_axis;
                    x[k] = xi_box.lo[k] + t * (xi_box.hi[k] - xi_box.lo[k]);
                }
                best = best.max(self.value(&zero, &x).abs());
            }
        }
        best
    }

    /// `Ktilde_nabla = max{K_nabla, max_x |U(0, x)|}`.
    fn ktilde_nabla(&self, xi_box: &BoxRegion) -> f64 {
        self.growth().k_nabla.max(self.max_abs_at_origin(xi_box))
    }

    /// Upper bound on `sup_{x in box} |U(theta, x)|` from the linear growth bound.
    fn sup_abs_bound(&self, theta: &[f64], grid: &GridSpec) -> f64 {
        let g = self.growth();
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        self.ktilde_nabla(&grid.xi_box) * (1.0 + grid.m_xi()).powi(g.nu as i32) * (1.0 + norm)
    }
}

/// Logistic sigmoid, stable for large `|t|`.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if t >= 0.0 { r } else { e * r }
}

/// Single-neuron regression `N(theta, z) = sigmoid(<w, z> + b0)` with squared
/// loss `U(theta, (z, y)) = (y - N(theta, z))^2`.
///
/// Parameters are laid out as `theta = (w_1, .., w_{m-1}, b0)`, so `d = m`.
/// Data points are `x = (z_1, .., z_{m-1}, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionNet {
    m: usize,
}

impl RegressionNet {
    /// `m` is the data dimension (features plus response); must be at least 2.
    pub fn new(m: usize) -> Self {
        assert!(m >= 2, "regression data needs at least one feature and a response");
        Self { m }
    }

    #[inline]
    fn affine(&self, theta: &[f64], z: &[f64]) -> f64 {
        let k = self.m - 1;
        theta[..k].iter().zip(z).map(|(w, z)| w * z).sum::<f64>() + theta[k]
    }

    /// `sigmoid(<w, z> + b0)`; `z` has length `m - 1`.
    pub fn predict(&self, theta: &[f64], z: &[f64]) -> f64 {
        sigmoid(self.affine(theta, z))
    }
}

impl UtilityModel for RegressionNet {
    fn param_dim(&self) -> usize {
        self.m
    }

    fn data_dim(&self) -> usize {
        self.m
    }

    #[inline]
    fn value(&self, theta: &[f64], x: &[f64]) -> f64 {
        let (z, y) = x.split_at(self.m - 1);
        let r = y[0] - self.predict(theta, z);
        r * r
    }

    #[inline]
    fn gradient(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) {
        self.value_and_gradient(theta, x, grad);
    }

    #[inline]
    fn value_and_gradient(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.m - 1;
        let (z, y) = x.split_at(k);
        let s = sigmoid(self.affine(theta, z));
        let r = y[0] - s;
        let common = -2.0 * r * s * (1.0 - s);
        for (g, zi) in grad[..k].iter_mut().zip(z) {
            *g = common * zi;
        }
        grad[k] = common;
        r * r
    }

    /// Evaluates the sigmoid once per run of points that share features.
    fn values(&self, theta: &[f64], points: &GridPoints, values: &mut [f64]) {
        let (m, k, run) = (self.m, self.m - 1, points.run_len());
        for (block, vals) in points.runs().zip(values.chunks_exact_mut(run)) {
            let s = self.predict(theta, &block[..k]);
            for (i, v) in vals.iter_mut().enumerate() {
                let r = block[i * m + k] - s;
                *v = r * r;
            }
        }
    }

    fn values_and_gradients(&self, theta: &[f64], points: &GridPoints, values: &mut [f64], grads: &mut [f64]) {
        let (m, k, run) = (self.m, self.m - 1, points.run_len());
        let blocks = points.runs().zip(values.chunks_exact_mut(run)).zip(grads.chunks_exact_mut(run * m));
        for ((block, vals), gs) in blocks {
            let z = &block[..k];
            let s = self.predict(theta, z);
            for (i, (v, g)) in vals.iter_mut().zip(gs.chunks_exact_mut(m)).enumerate() {
                let r = block[i * m + k] - s;
                let common = -2.0 * r * s * (1.0 - s);
                for (gi, zi) in g[..k].iter_mut().zip(z) {
                    *gi = common * zi;
                }
                g[k] = common;
                *v = r * r;
            }
        }
    }

    fn growth(&self) -> GrowthConstants {
        let m = self.m as f64;
        GrowthConstants {
            k_nabla: 2.0 * m,
            l_nabla: 6.0 * m,
            nu: 3,
            j_u: 4.0,
            chi: 1,
        }
    }

    /// `U(0, x) = (y - 1/2)^2`, maximised at an extreme of the response axis.
    fn max_abs_at_origin(&self, xi_box: &BoxRegion) -> f64 {
        let k = self.m - 1;
        let lo = xi_box.lo[k] - 0.5;
        let hi = xi_box.hi[k] - 0.5;
        (lo * lo).max(hi * hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    // second evaluation path, written out without the shared helpers
    fn u_reference(theta: &[f64], x: &[f64]) -> f64 {
        let t = theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2] + theta[3];
        let n = 1.0 / (1.0 + (-t).exp());
        (x[3] - n).powi(2)
    }

    #[test]
    fn predict_examples() {
        let net = RegressionNet::new(4);
        assert_eq!(net.predict(&[0.0; 4], &[0.3, -2.0, 1.0]), 0.5);
        assert!((net.predict(&[100.0, 0.0, 0.0, 100.0], &[10.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        let star = [-0.5, 0.5, 0.1, -0.2];
        let expected = 1.0 / (1.0 + 0.2f64.exp());
        assert!((net.predict(&star, &[0.0, 0.0, 0.0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn value_examples() {
        let net = RegressionNet::new(4);
        assert_eq!(net.value(&[0.0; 4], &[1.0, 2.0, 3.0, 0.5]), 0.0);
        assert_eq!(net.value(&[0.0; 4], &[1.0, 2.0, 3.0, 1.0]), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let th: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!((net.value(&th, &x) - u_reference(&th, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_zero_at_zero_residual() {
        let net = RegressionNet::new(4);
        let mut g = [1.0; 4];
        net.gradient(&[0.0; 4], &[0.7, -1.0, 2.0, 0.5], &mut g);
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = RegressionNet::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..20 {
            let th: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut g = [0.0; 4];
            let v = net.value_and_gradient(&th, &x, &mut g);
            assert_eq!(v, net.value(&th, &x));
            let mut fd = [0.0; 4];
            for i in 0..4 {
                let mut p = th.clone();
                let mut q = th.clone();
                p[i] += h;
                q[i] -= h;
                fd[i] = (u_reference(&p, &x) - u_reference(&q, &x)) / (2.0 * h);
            }
            let err = norm(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-6 * norm(&fd).max(1e-3), "err={err}");
        }
    }

    #[test]
    fn published_constants() {
        let g = RegressionNet::new(4).growth();
        assert_eq!((g.l_nabla, g.nu, g.k_nabla, g.j_u, g.chi), (24.0, 3, 8.0, 4.0, 1));
    }

    #[test]
    fn ktilde_uses_response_extremes() {
        let net = RegressionNet::new(4);
        let b = BoxRegion::cube(4, -3.0, 3.0).unwrap();
        assert_eq!(net.max_abs_at_origin(&b), 12.25);
        assert_eq!(net.ktilde_nabla(&b), 12.25);
        // generic scan agrees with the closed form on this box
        struct Generic(RegressionNet);
        impl UtilityModel for Generic {
            fn param_dim(&self) -> usize { 4 }
            fn data_dim(&self) -> usize { 4 }
            fn value(&self, t: &[f64], x: &[f64]) -> f64 { self.0.value(t, x) }
            fn gradient(&self, t: &[f64], x: &[f64], g: &mut [f64]) { self.0.gradient(t, x, g) }
            fn growth(&self) -> GrowthConstants { self.0.growth() }
        }
        assert_eq!(Generic(net).max_abs_at_origin(&b), 12.25);
    }

    #[test]
    fn growth_inequalities_hold_on_samples() {
        let net = RegressionNet::new(4);
        let g = net.growth();
        let b = BoxRegion::cube(4, -3.0, 3.0).unwrap();
        let kt = net.ktilde_nabla(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grad = [0.0; 4];
        for _ in 0..10_000 {
            let th: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let x1: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x2: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let nx1 = norm(&x1);
            net.gradient(&th, &x1, &mut grad);
            assert!(norm(&grad) <= g.k_nabla * (1.0 + nx1).powi(g.nu as i32));
            let u1 = net.value(&th, &x1);
            assert!(u1.abs() <= kt * (1.0 + nx1).powi(g.nu as i32) * (1.0 + norm(&th)));
            let lhs = (u1 - net.value(&th, &x2)).abs();
            let dx = norm(&x1.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let rhs = g.j_u
                * (1.0 + norm(&th))
                * (1.0 + nx1 + norm(&x2)).powi(g.chi as i32)
                * dx;
            assert!(lhs <= rhs + 1e-12);
            let th2: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut grad2 = [0.0; 4];
            net.gradient(&th2, &x1, &mut grad2);
            let dg = norm(&grad.iter().zip(&grad2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let dth = norm(&th.iter().zip(&th2).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(dg <= g.l_nabla * (1.0 + nx1).powi(g.nu as i32) * dth + 1e-12);
        }
    }
}
