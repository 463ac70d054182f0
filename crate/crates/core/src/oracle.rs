//! Brute-force ground truth on tiny instances: exact transport costs,
//! the penalised primal by simplex search and its one-dimensional dual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::golden::golden_section;
use crate::grid::{BoxRegion, DiscreteMeasure, GridSpec};
use crate::model::{GrowthConstants, UtilityModel};
use crate::objective::{self, DroParams, DroProblem};

pub const MAX_SUPPORT: usize = 4;
pub const MAX_DIM: usize = 2;
/// Tolerance on total-mass mismatch.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Finest simplex resolution of the primal search.
pub const FINEST_STEP: f64 = 1e-5;

/// A finite-support instance of the penalised inner problem at a fixed `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub m: usize,
    pub support: Vec<Vec<f64>>,
    /// `U(theta, support[i])`.
    pub u_values: Vec<f64>,
    pub mu0: Vec<f64>,
    pub eta2: f64,
    pub p: f64,
}

impl TinyInstance {
    pub fn new(support: Vec<Vec<f64>>, u_values: Vec<f64>, mu0: Vec<f64>, eta2: f64, p: f64) -> Result<Self> {
        let n = support.len();
        if n == 0 || n > MAX_SUPPORT {
            return Err(Error::InvalidArgument(format!("support must have 1..={MAX_SUPPORT} points, got {n}")));
        }
        let m = support[0].len();
        if m == 0 || m > MAX_DIM || support.iter().any(|s| s.len() != m) {
            return Err(Error::InvalidArgument(format!("points must share a dimension in 1..={MAX_DIM}")));
        }
        if u_values.len() != n || mu0.len() != n {
            return Err(Error::InvalidArgument("u_values and mu0 must match the support".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if support[i] == support[j] {
                    return Err(Error::InvalidArgument(format!("support points {j} and {i} coincide")));
                }
            }
        }
        check_masses(&mu0)?;
        if !(eta2 > 0.0 && eta2.is_finite()) || !(p >= 1.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("need eta2 > 0 and p >= 1, got {eta2}, {p}")));
        }
        if u_values.iter().any(|u| !u.is_finite()) {
            return Err(Error::InvalidArgument("u_values must be finite".into()));
        }
        Ok(Self {
            m,
            support,
            u_values,
            mu0,
            eta2,
            p,
        })
    }

    /// Draws `n` distinct points in `[-1, 1]^m` with values in `[-1, 1]` and
    /// a random reference measure.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, eta2: f64, p: f64) -> Result<Self> {
        let support: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let u_values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut mu0: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let head: f64 = mu0[..n - 1].iter().sum();
        mu0[n - 1] = 1.0 - head;
        Self::new(support, u_values, mu0, eta2, p)
    }

    /// `c(x_i, x_j) = |x_i - x_j|^p`.
    pub fn cost_matrix(&self) -> Vec<Vec<f64>> {
        self.support
            .iter()
            .map(|x| self.support.iter().map(|y| objective::transport_cost(x, y, self.p)).collect())
            .collect()
    }

    fn len(&self) -> usize {
        self.support.len()
    }

    /// Optimal cost of moving `mu0` to `mu` on this support.
    pub fn cost_from_reference(&self, mu: &[f64]) -> Result<f64> {
        if self.m == 1 {
            let xs: Vec<f64> = self.support.iter().map(|s| s[0]).collect();
            monotone_transport_cost(&xs, &self.mu0, mu, self.p)
        } else {
            transport_cost(&self.mu0, mu, &self.cost_matrix())
        }
    }
}

fn check_masses(mu: &[f64]) -> Result<()> {
    if mu.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("masses must be nonnegative".into()));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidArgument(format!("masses sum to {total}, not 1")));
    }
    Ok(())
}

/// Spanning trees of the complete bipartite graph `K_{n,k}`, each a list of
/// `(row, column)` edges. Their flows are the basic solutions of the
/// transportation polytope.
#[derive(Debug, Clone)]
pub struct TransportSolver {
    n: usize,
    k: usize,
    trees: Vec<Vec<(usize, usize)>>,
}

impl TransportSolver {
    pub fn new(n: usize, k: usize) -> Self {
        assert!(n >= 1 && k >= 1 && n * k <= 16, "transport solver sized for at most 4x4");
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
        let need = n + k - 1;
        let mut trees = Vec::new();
        for mask in 0u32..(1 << edges.len()) {
            if mask.count_ones() as usize != need {
                continue;
            }
            let chosen: Vec<(usize, usize)> = (0..edges.len()).filter(|e| mask >> e & 1 == 1).map(|e| edges[e]).collect();
            let mut parent: Vec<usize> = (0..n + k).collect();
            fn find(p: &mut [usize], mut v: usize) -> usize {
                while p[v] != v {
                    p[v] = p[p[v]];
                    v = p[v];
                }
                v
            }
            let acyclic = chosen.iter().all(|&(i, j)| {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
                parent[a] = b;
                a != b
            });
            if acyclic {
                trees.push(chosen);
            }
        }
        Self { n, k, trees }
    }

    /// Number of basic solutions enumerated.
    pub fn basis_count(&self) -> usize {
        self.trees.len()
    }

    /// Minimum of `sum pi_ij c_ij` over couplings of `mu` and `nu`.
    pub fn solve(&self, mu: &[f64], nu: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
        if mu.len() != self.n || nu.len() != self.k || cost.len() != self.n || cost.iter().any(|r| r.len() != self.k) {
            return Err(Error::InvalidArgument("transport dimensions do not match".into()));
        }
        check_masses(mu)?;
        check_masses(nu)?;
        let nv = self.n + self.k;
        let mut best = f64::INFINITY;
        let mut supply = [0.0f64; 8];
        let mut degree = [0usize; 8];
        let mut done = [false; 8];
        'tree: for tree in &self.trees {
            supply[..self.n].copy_from_slice(mu);
            supply[self.n..nv].copy_from_slice(nu);
            degree[..nv].fill(0);
            for &(i, j) in tree {
                degree[i] += 1;
                degree[self.n + j] += 1;
            }
            done[..tree.len()].fill(false);
            let mut total = 0.0;
            for _ in 0..tree.len() {
                let mut found = None;
                for (e, &(i, j)) in tree.iter().enumerate() {
                    if done[e] {
                        continue;
                    }
                    if degree[i] == 1 {
                        found = Some((e, i, self.n + j));
                        break;
                    }
                    if degree[self.n + j] == 1 {
                        found = Some((e, self.n + j, i));
                        break;
                    }
                }
                let (e, leaf, other) = found.expect("a tree always has a leaf");
                let flow = supply[leaf];
                if flow < -MASS_TOLERANCE {
                    continue 'tree;
                }
                supply[other] -= flow;
                supply[leaf] = 0.0;
                degree[leaf] -= 1;
                degree[other] -= 1;
                done[e] = true;
                let (i, j) = tree[e];
                total += flow.max(0.0) * cost[i][j];
            }
            best = best.min(total);
        }
        Ok(best)
    }
}

/// Exact optimal transport cost between `mu` and `mu_prime` under `cost`,
/// by enumerating the basic solutions of the transportation polytope.
pub fn transport_cost(mu: &[f64], mu_prime: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    if mu.is_empty() || mu_prime.is_empty() || mu.len() * mu_prime.len() > 16 {
        return Err(Error::InvalidArgument("supports must have 1..=4 points".into()));
    }
    TransportSolver::new(mu.len(), mu_prime.len()).solve(mu, mu_prime, cost)
}

/// Transport cost on a common one-dimensional support with cost
/// `|x - y|^p`, `p >= 1`, through the monotone (quantile) coupling.
pub fn monotone_transport_cost(points: &[f64], mu: &[f64], mu_prime: &[f64], p: f64) -> Result<f64> {
    if points.len() != mu.len() || points.len() != mu_prime.len() {
        return Err(Error::InvalidArgument("measures must live on the given points".into()));
    }
    check_masses(mu)?;
    check_masses(mu_prime)?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    let (mut i, mut j) = (0, 0);
    let (mut left_i, mut left_j) = (mu[order[0]], mu_prime[order[0]]);
    let mut total = 0.0;
    while i < order.len() && j < order.len() {
        let moved = left_i.min(left_j);
        total += moved * (points[order[i]] - points[order[j]]).abs().powf(p);
        left_i -= moved;
        left_j -= moved;
        if left_i <= left_j {
            i += 1;
            if i < order.len() {
                left_i = mu[order[i]];
            }
        } else {
            j += 1;
            if j < order.len() {
                left_j = mu_prime[order[j]];
            }
        }
    }
    Ok(total)
}

fn primal_objective(inst: &TinyInstance, solver: &TransportSolver, cost: &[Vec<f64>], xs: &[f64], mu: &[f64]) -> f64 {
    let gain: f64 = mu.iter().zip(&inst.u_values).map(|(w, u)| w * u).sum();
    let d = if inst.m == 1 {
        monotone_transport_cost(xs, &inst.mu0, mu, inst.p)
    } else {
        solver.solve(&inst.mu0, mu, cost)
    }
    .expect("search points are probability vectors");
    gain - d * d / (2.0 * inst.eta2)
}

/// Maximises `f` over lattice points `center + h k` of the simplex with
/// `|k_i| <= radius` on the first `n - 1` coordinates.
fn lattice_search(center: &[f64], h: f64, radius: i64, f: &mut impl FnMut(&[f64]) -> f64, best: &mut (Vec<f64>, f64)) {
    let n = center.len();
    if n == 1 {
        return;
    }
    let free = n - 1;
    let mut k = vec![-radius; free];
    let mut mu = vec![0.0; n];
    loop {
        let mut head = 0.0;
        let mut ok = true;
        for i in 0..free {
            let v = center[i] + h * k[i] as f64;
            if v < -1e-15 || v > 1.0 + 1e-15 {
                ok = false;
                break;
            }
            mu[i] = v.clamp(0.0, 1.0);
            head += mu[i];
        }
        if ok && head <= 1.0 + 1e-15 {
            mu[free] = (1.0 - head).max(0.0);
            let total: f64 = mu.iter().sum();
            if (total - 1.0).abs() <= MASS_TOLERANCE {
                let v = f(&mu);
                if v > best.1 {
                    *best = (mu.clone(), v);
                }
            }
        }
        let mut axis = 0;
        loop {
            if axis == free {
                return;
            }
            if k[axis] < radius {
                k[axis] += 1;
                break;
            }
            k[axis] = -radius;
            axis += 1;
        }
    }
}

/// `max_mu sum mu_i u_i - d_c(mu0, mu)^2 / (2 eta2)` over the simplex.
///
/// Coarse lattice (step `1e-2`, or `2e-2` for four points) seeded with `mu0`
/// and the vertices, then repeated local refinement by a factor of ten in a
/// window of two coarse steps until the step reaches `1e-5`. The objective is
/// concave, so the local windows do not miss the maximiser.
pub fn primal_value(inst: &TinyInstance) -> f64 {
    let n = inst.len();
    let solver = TransportSolver::new(if inst.m == 1 { 1 } else { n }, if inst.m == 1 { 1 } else { n });
    let cost = inst.cost_matrix();
    let xs: Vec<f64> = inst.support.iter().map(|s| s[0]).collect();
    let mut f = |mu: &[f64]| primal_objective(inst, &solver, &cost, &xs, mu);
    let mut best = (inst.mu0.clone(), f(&inst.mu0));
    for v in 0..n {
        let mut e = vec![0.0; n];
        e[v] = 1.0;
        let val = f(&e);
        if val > best.1 {
            best = (e, val);
        }
    }
    if n == 1 {
        return best.1;
    }
    let mut h: f64 = if n == 4 { 2e-2 } else { 1e-2 };
    let coarse = (1.0 / h).round() as i64;
    lattice_search(&vec![0.0; n], h, coarse, &mut f, &mut best);
    while h > FINEST_STEP * 1.5 {
        let next = if h > 1.5e-2 { h / 20.0 } else { h / 10.0 };
        let radius = (2.0 * h / next).round() as i64;
        let center = best.0.clone();
        lattice_search(&center, next, radius, &mut f, &mut best);
        h = next;
    }
    best.1
}

/// Upper end of the dual bracket:
/// `(2 / sqrt(eta2)) (1 + 2 max|u|) + 2^{p+2} M^p / eta2`, `M` the largest support norm.
pub fn dual_bracket(inst: &TinyInstance) -> f64 {
    let umax = inst.u_values.iter().fold(0.0f64, |a, u| a.max(u.abs()));
    let m = inst
        .support
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    2.0 / inst.eta2.sqrt() * (1.0 + 2.0 * umax) + 2f64.powf(inst.p + 2.0) * m.powf(inst.p) / inst.eta2
}

/// `g(a) = eta2 a^2 / 2 + sum_i mu0_i max_j {u_j - a c_ij}`.
pub fn dual_objective(inst: &TinyInstance, cost: &[Vec<f64>], a: f64) -> f64 {
    let inner: f64 = inst
        .mu0
        .iter()
        .zip(cost)
        .map(|(w, row)| {
            let best = row
                .iter()
                .zip(&inst.u_values)
                .map(|(c, u)| u - a * c)
                .fold(f64::NEG_INFINITY, f64::max);
            w * best
        })
        .sum();
    0.5 * inst.eta2 * a * a + inner
}

/// `inf_{a >= 0} g(a)` by golden section on `[0, dual_bracket]`.
pub fn dual_value(inst: &TinyInstance) -> f64 {
    let cost = inst.cost_matrix();
    let hi = dual_bracket(inst);
    golden_section(|a| dual_objective(inst, &cost, a), 0.0, hi, 1e-12 * hi.max(1.0)).value
}

/// `|primal_value - dual_value|`.
pub fn duality_gap(inst: &TinyInstance) -> f64 {
    (primal_value(inst) - dual_value(inst)).abs()
}

/// `U(theta, x) = cos(theta - 2x)` on one parameter and one data coordinate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosineUtility;

impl UtilityModel for CosineUtility {
    fn param_dim(&self) -> usize {
        1
    }

    fn data_dim(&self) -> usize {
        1
    }

    fn value(&self, theta: &[f64], x: &[f64]) -> f64 {
        (theta[0] - 2.0 * x[0]).cos()
    }

    fn gradient(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) {
        grad[0] = -(theta[0] - 2.0 * x[0]).sin();
    }

    fn growth(&self) -> GrowthConstants {
        GrowthConstants {
            k_nabla: 2.0,
            l_nabla: 2.0,
            nu: 0,
            j_u: 2.0,
            chi: 0,
        }
    }

    fn max_abs_at_origin(&self, _: &BoxRegion) -> f64 {
        1.0
    }
}

/// Convergence of the discretised primal as the mesh is refined.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureStudy {
    pub levels: Vec<u32>,
    /// `|u_jj - u_{jj+gap}|` per level.
    pub differences: Vec<f64>,
    /// Least-squares slope of `log2` differences against `jj`.
    pub slope: f64,
}

/// The fixed one-dimensional instance: [`CosineUtility`] on `[-1.5, 1.5]`,
/// reference atoms at `-1, 0.25, 1` with masses `0.3, 0.5, 0.2`,
/// `eta1 = 0.1`, `eta2 = 0.5`, `p = 2`.
pub fn quadrature_problem(jj: u32) -> Result<DroProblem<CosineUtility>> {
    let grid = GridSpec::new(2, jj, BoxRegion::cube(1, -1.5, 1.5)?)?;
    let mu = DiscreteMeasure::new(1, vec![-1.0, 0.25, 1.0], vec![0.3, 0.5, 0.2])?;
    let params = DroParams {
        eta1: 0.1,
        eta2: 0.5,
        p: 2.0,
        delta: 0.1,
    };
    DroProblem::new(CosineUtility, params, grid, mu)
}

/// Differences `|u_jj(theta) - u_{jj+gap}(theta)|` for `jj` in `levels`.
pub fn quadrature_study(theta: f64, levels: std::ops::RangeInclusive<u32>, gap: u32) -> Result<QuadratureStudy> {
    let levels: Vec<u32> = levels.collect();
    if levels.len() < 2 {
        return Err(Error::InvalidArgument("need at least two levels".into()));
    }
    let top = *levels.last().unwrap() + gap;
    let lo = levels[0];
    let mut u = Vec::new();
    for jj in lo..=top {
        u.push(quadrature_problem(jj)?.u_discrete(&[theta])?.value);
    }
    let differences: Vec<f64> = levels
        .iter()
        .map(|&jj| (u[(jj - lo) as usize] - u[(jj + gap - lo) as usize]).abs())
        .collect();
    let xs: Vec<f64> = levels.iter().map(|&j| j as f64).collect();
    let ys: Vec<f64> = differences.iter().map(|d| d.max(f64::MIN_POSITIVE).log2()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(QuadratureStudy {
        levels,
        differences,
        slope: sxy / sxx,
    })
}

/// Exact optimum of the identity instance used as a sanity anchor.
pub fn identity_instance(u: f64) -> TinyInstance {
    TinyInstance::new(vec![vec![0.0]], vec![u], vec![1.0], 1.0, 2.0).expect("valid by construction")
}
