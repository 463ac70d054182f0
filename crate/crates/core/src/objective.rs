//! The grid-discretised, softmax-smoothed dual objective and its gradient.
//!
//! For `thetabar = (theta, alpha)` and a data point `x`, every grid point
//! `xi_j` inside the data box receives the score
//!
//! ```text
//! s_j = U(theta, xi_j) - iota(alpha) * |x - xi_j|^p
//! ```
//!
//! The smoothed value is `delta * log((1/N) sum_j exp(s_j / delta))`, always
//! evaluated after shifting by `max_j s_j`. Adding the regularisers
//! `eta1/2 |theta|^2 + eta2/2 iota(alpha)^2` gives `Vtilde`, whose gradient in
//! `thetabar` is the sampler drift `H`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::golden::{golden_section, Minimum};
use crate::grid::{self, DiscreteMeasure, GridPoints, GridSpec};
use crate::model::UtilityModel;
use crate::penalty::{iota, iota_prime};

/// Softmax exponents below this are dropped.
pub const EXP_CUTOFF: f64 = -708.0;

/// Golden-section tolerance on the transport multiplier in [`DroProblem::u_discrete`].
pub const DUAL_TOLERANCE: f64 = 1e-8;

/// Extended decision variable `(theta, alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBar {
    pub theta: Vec<f64>,
    pub alpha: f64,
}

impl ThetaBar {
    pub fn new(theta: Vec<f64>, alpha: f64) -> Self {
        Self { theta, alpha }
    }

    /// Splits a flat `(d + 1)`-vector; the last entry is `alpha`.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        match v.split_last() {
            Some((alpha, theta)) if !theta.is_empty() => Ok(Self::new(theta.to_vec(), *alpha)),
            _ => Err(Error::InvalidArgument("thetabar needs at least two entries".into())),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.alpha);
        v
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + 1
    }

    pub fn norm_sq(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum::<f64>() + self.alpha * self.alpha
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.theta.iter().all(|t| t.is_finite())
    }
}

/// Scalar parameters of the penalised problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroParams {
    /// Weight of `|theta|^2 / 2`.
    pub eta1: f64,
    /// Model-uncertainty level; the penalty is `d_c^2 / (2 eta2)`.
    pub eta2: f64,
    /// Cost exponent, `c(x, y) = |x - y|^p`.
    pub p: f64,
    /// Smoothing tolerance.
    pub delta: f64,
}

impl DroParams {
    fn validate(&self) -> Result<()> {
        let ok = self.eta1 > 0.0
            && self.eta2 > 0.0
            && self.delta > 0.0
            && self.p >= 1.0
            && [self.eta1, self.eta2, self.delta, self.p].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "need eta1, eta2, delta > 0 and p >= 1, got {self:?}"
            )))
        }
    }
}

/// `|x - y|^p` with the Euclidean norm.
#[inline]
pub fn transport_cost(x: &[f64], y: &[f64], p: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if p == 2.0 {
        sq
    } else if p == 1.0 {
        sq.sqrt()
    } else {
        sq.powf(0.5 * p)
    }
}

/// Reusable buffers for repeated gradient evaluations.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    grads: Vec<f64>,
    scores: Vec<f64>,
    costs: Vec<f64>,
    kept: Vec<usize>,
}

/// Optimal transport multiplier and value of the discretised primal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSolution {
    /// Minimising multiplier `a* >= 0`.
    pub multiplier: f64,
    /// `u^{ell, jj}(theta)`.
    pub value: f64,
    /// Upper end of the search bracket.
    pub bracket: f64,
}

/// The discretised and smoothed penalised DRO problem.
#[derive(Debug, Clone)]
pub struct DroProblem<M> {
    params: DroParams,
    grid: GridSpec,
    xi_points: GridPoints,
    mu_disc: DiscreteMeasure,
    model: M,
}

impl<M: UtilityModel> DroProblem<M> {
    /// Builds a problem from an already discretised reference measure.
    pub fn new(model: M, params: DroParams, grid: GridSpec, mu_disc: DiscreteMeasure) -> Result<Self> {
        params.validate()?;
        if model.data_dim() != grid.m || mu_disc.dim() != grid.m {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: model m = {}, grid m = {}, measure m = {}",
                model.data_dim(),
                grid.m,
                mu_disc.dim()
            )));
        }
        let scale = 2f64.powi(grid.jj as i32);
        for (x, _) in mu_disc.atoms() {
            if x.iter().any(|v| (v * scale).fract() != 0.0) || !grid.in_grid_box(x) {
                return Err(Error::InvalidArgument(format!(
                    "reference atom {x:?} is not a grid point"
                )));
            }
        }
        let xi_points = grid::enumerate_points(&grid)?;
        if xi_points.is_empty() {
            return Err(Error::InvalidArgument("no grid point lies inside the data box".into()));
        }
        Ok(Self {
            params,
            grid,
            xi_points,
            mu_disc,
            model,
        })
    }

    /// Builds a problem whose reference measure is the empirical measure of
    /// `samples`, snapped onto the grid.
    pub fn from_samples<'a, I>(model: M, params: DroParams, grid: GridSpec, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mu = grid::discretise_samples(samples, &grid)?;
        Self::new(model, params, grid, mu)
    }

    pub fn params(&self) -> &DroParams {
        &self.params
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn xi_points(&self) -> &GridPoints {
        &self.xi_points
    }

    pub fn mu_disc(&self) -> &DiscreteMeasure {
        &self.mu_disc
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// `N_actual`, the number of grid points inside the data box.
    pub fn n_points(&self) -> usize {
        self.xi_points.len()
    }

    /// Returns a copy with different scalar parameters, reusing the grid.
    pub fn with_params(&self, params: DroParams) -> Result<Self>
    where
        M: Clone,
    {
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn regulariser(&self, tb: &ThetaBar) -> f64 {
        let th_sq: f64 = tb.theta.iter().map(|t| t * t).sum();
        let a = iota(tb.alpha);
        0.5 * self.params.eta1 * th_sq + 0.5 * self.params.eta2 * a * a
    }

    /// `U(theta, xi_j)` for every grid point.
    pub fn grid_values(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.xi_points.len()];
        self.model.values(theta, &self.xi_points, &mut out);
        out
    }

    /// `s_j = U(theta, xi_j) - iota(alpha) |x - xi_j|^p`.
    pub fn score(&self, tb: &ThetaBar, x: &[f64], j: usize) -> f64 {
        let xi = self.xi_points.point(j);
        self.model.value(&tb.theta, xi) - iota(tb.alpha) * transport_cost(x, xi, self.params.p)
    }

    fn scores_from_values(&self, values: &[f64], a: f64, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let p = self.params.p;
        out.extend(
            values
                .iter()
                .zip(self.xi_points.iter())
                .map(|(u, xi)| u - a * transport_cost(x, xi, p)),
        );
    }

    /// Normalised softmax weights `exp((s_j - max) / delta) / sum`.
    pub fn softmax_weights(&self, tb: &ThetaBar, x: &[f64]) -> Vec<f64> {
        let values = self.grid_values(&tb.theta);
        let mut scores = Vec::new();
        self.scores_from_values(&values, iota(tb.alpha), x, &mut scores);
        softmax(&scores, self.params.delta)
    }

    /// `V^delta(thetabar, x)`.
    pub fn smoothed_value(&self, tb: &ThetaBar, x: &[f64]) -> f64 {
        let values = self.grid_values(&tb.theta);
        self.smoothed_from_values(&values, iota(tb.alpha), x)
    }

    fn smoothed_from_values(&self, values: &[f64], a: f64, x: &[f64]) -> f64 {
        let mut scores = Vec::with_capacity(values.len());
        self.scores_from_values(values, a, x, &mut scores);
        smooth_max(&scores, self.params.delta)
    }

    fn hard_max_from_values(&self, values: &[f64], a: f64, x: &[f64]) -> f64 {
        let p = self.params.p;
        values
            .iter()
            .zip(self.xi_points.iter())
            .map(|(u, xi)| u - a * transport_cost(x, xi, p))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Vtilde^delta(thetabar, x) = V^delta + eta1/2 |theta|^2 + eta2/2 iota(alpha)^2`.
    pub fn tilde_value(&self, tb: &ThetaBar, x: &[f64]) -> f64 {
        self.smoothed_value(tb, x) + self.regulariser(tb)
    }

    /// The drift `H(thetabar, x) = grad_thetabar Vtilde^delta(thetabar, x)`,
    /// laid out as `(theta-block, alpha)`.
    pub fn stochastic_gradient(&self, tb: &ThetaBar, x: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::default();
        let mut out = vec![0.0; tb.dim()];
        self.stochastic_gradient_into(tb, x, &mut ws, &mut out);
        out
    }

    /// Allocation-free [`Self::stochastic_gradient`].
    pub fn stochastic_gradient_into(&self, tb: &ThetaBar, x: &[f64], ws: &mut Workspace, out: &mut [f64]) {
        let d = tb.theta.len();
        let n = self.xi_points.len();
        let p = self.params.p;
        let inv_delta = 1.0 / self.params.delta;
        let a = iota(tb.alpha);

        ws.grads.resize(n * d, 0.0);
        ws.scores.resize(n, 0.0);
        ws.costs.resize(n, 0.0);
        self.model
            .values_and_gradients(&tb.theta, &self.xi_points, &mut ws.scores, &mut ws.grads);

        let mut max = f64::NEG_INFINITY;
        for ((s, c), xi) in ws.scores.iter_mut().zip(ws.costs.iter_mut()).zip(self.xi_points.iter()) {
            *c = transport_cost(x, xi, p);
            *s -= a * *c;
            max = max.max(*s);
        }

        let acc = &mut out[..d];
        acc.iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        let mut cost_acc = 0.0;
        // below the cutoff a weight is under the smallest normal double and
        // cannot move any accumulator, whose largest term is 1
        ws.kept.clear();
        for (j, s) in ws.scores.iter_mut().enumerate() {
            *s = (*s - max) * inv_delta;
            if *s >= EXP_CUTOFF {
                ws.kept.push(j);
            }
        }
        for &j in &ws.kept {
            let w = ws.scores[j].exp();
            total += w;
            cost_acc += w * ws.costs[j];
            for (o, g) in acc.iter_mut().zip(&ws.grads[j * d..(j + 1) * d]) {
                *o += w * g;
            }
        }
        let eta1 = self.params.eta1;
        for (o, t) in acc.iter_mut().zip(&tb.theta) {
            *o = eta1 * t + *o / total;
        }
        let ip = iota_prime(tb.alpha);
        out[d] = self.params.eta2 * a * ip - ip * cost_acc / total;
    }

    /// `v^delta(thetabar)`: `Vtilde^delta` integrated against the discretised
    /// reference measure.
    pub fn v_delta_full(&self, tb: &ThetaBar) -> Result<f64> {
        let values = self.grid_values(&tb.theta);
        self.v_delta_from_values(&values, tb)
    }

    /// [`Self::v_delta_full`] with `U(theta, xi_j)` already evaluated.
    pub fn v_delta_from_values(&self, values: &[f64], tb: &ThetaBar) -> Result<f64> {
        let a = iota(tb.alpha);
        let inner = self.integrate(|x| self.smoothed_from_values(values, a, x))?;
        Ok(inner + self.regulariser(tb))
    }

    /// `v^{ell, jj}(thetabar)`: as [`Self::v_delta_full`] with the hard maximum.
    pub fn v_nonsmoothed(&self, tb: &ThetaBar) -> Result<f64> {
        let values = self.grid_values(&tb.theta);
        let a = iota(tb.alpha);
        let inner = self.integrate(|x| self.hard_max_from_values(&values, a, x))?;
        Ok(inner + self.regulariser(tb))
    }

    /// Mass-weighted sum over the reference atoms. Atoms are evaluated in
    /// parallel but summed in atom order, so the result does not depend on
    /// the thread count.
    fn integrate(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<f64> {
        if self.mu_disc.is_empty() {
            return Err(Error::InvalidState("reference measure has no atoms".into()));
        }
        let atoms: Vec<(&[f64], f64)> = self.mu_disc.atoms().collect();
        let terms: Vec<f64> = atoms.par_iter().map(|(x, w)| w * f(x)).collect();
        Ok(terms.iter().sum())
    }

    /// Upper end `K_theta` of the multiplier bracket:
    /// `(2 / sqrt(eta2)) (1 + 2 B_theta) + 2^{p+2} M_Xi^p / eta2` where
    /// `B_theta = Ktilde (1 + M_Xi)^nu (1 + |theta|)` bounds `sup_x |U(theta, x)|`.
    pub fn kappa_theta(&self, theta: &[f64]) -> f64 {
        let bound = self.model.sup_abs_bound(theta, &self.grid);
        let p = self.params.p;
        let m_xi = self.grid.m_xi();
        2.0 / self.params.eta2.sqrt() * (1.0 + bound + bound)
            + 2f64.powf(p + 2.0) * m_xi.powf(p) / self.params.eta2
    }

    /// The one-dimensional dual objective
    /// `g(a) = sum_x mu(x) max_j {U(theta, xi_j) - a |x - xi_j|^p} + eta1/2 |theta|^2 + eta2/2 a^2`.
    pub fn dual_objective(&self, theta: &[f64], multiplier: f64) -> Result<f64> {
        let values = self.grid_values(theta);
        self.dual_objective_from_values(&values, theta, multiplier)
    }

    fn dual_objective_from_values(&self, values: &[f64], theta: &[f64], a: f64) -> Result<f64> {
        let inner = self.integrate(|x| self.hard_max_from_values(values, a, x))?;
        let th_sq: f64 = theta.iter().map(|t| t * t).sum();
        Ok(inner + 0.5 * self.params.eta1 * th_sq + 0.5 * self.params.eta2 * a * a)
    }

    /// `u^{ell, jj}(theta)`, the discretised primal, through its convex
    /// one-dimensional dual minimised over `[0, K_theta]`.
    pub fn u_discrete(&self, theta: &[f64]) -> Result<DualSolution> {
        if self.mu_disc.is_empty() {
            return Err(Error::InvalidState("reference measure has no atoms".into()));
        }
        let values = self.grid_values(theta);
        let bracket = self.kappa_theta(theta);
        let Minimum { arg, value } = golden_section(
            |a| {
                self.dual_objective_from_values(&values, theta, a)
                    .expect("non-empty measure checked above")
            },
            0.0,
            bracket,
            DUAL_TOLERANCE,
        );
        Ok(DualSolution {
            multiplier: arg,
            value,
            bracket,
        })
    }
}

/// `delta * log((1/N) sum_j exp(s_j / delta))`, max-shifted.
pub fn smooth_max(scores: &[f64], delta: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| ((s - max) / delta).exp()).sum();
    max + delta * (sum / scores.len() as f64).ln()
}

/// Softmax weights at temperature `delta`, max-shifted.
pub fn softmax(scores: &[f64], delta: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| ((s - max) / delta).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}
