//! Closed-form constants of the convergence analysis and the theoretical
//! parameter selection built on them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::UtilityModel;
use crate::objective::{DroProblem, ThetaBar};
use crate::penalty::{dissipativity_constants, iota, iota_prime};

/// Relative margin used to turn strict inequalities into concrete choices.
pub const STRICT_MARGIN: f64 = 1e-6;

/// Where the radius of the compact set used by `C4` comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KRadius {
    /// Coercivity radius `K#` solving
    /// `min{eta1, eta2}/2 r^2 - (Ktilde (1+M)^nu + 2^p M^p) r - Ktilde (1+M)^nu = M#`
    /// with `M# = v^delta(thetabar_0) + delta log N`. An over-estimate.
    Surrogate,
    /// A bound supplied by the caller.
    User(f64),
    /// No bound; `C4` stays unavailable.
    Unavailable,
}

/// Every constant of the analysis, evaluated for one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsBundle {
    pub m: usize,
    pub d: usize,
    pub p: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub delta: f64,
    pub beta: f64,
    pub n_actual: usize,

    pub k_nabla: f64,
    pub ktilde_nabla: f64,
    pub l_nabla: f64,
    pub nu: u32,
    pub j_u: f64,
    pub chi: u32,
    pub m_xi: f64,
    /// Smallest and largest coordinate of the data box.
    pub xi_range: (f64, f64),

    pub a_iota: f64,
    pub b_iota: f64,
    pub l_iota: f64,
    pub m_iota: f64,
    pub ltilde_iota: f64,

    /// `E[(1 + (1 + |X0|)^{2p})^4]` over the training samples.
    pub moment_e: f64,
    /// `E[(1 + |X0|)^{2p}]` over the training samples.
    pub moment_2p: f64,
    /// `E|thetabar_0|^2`.
    pub theta0_sq: f64,

    pub a: f64,
    pub b: f64,
    /// `K_nabla (1 + M)^nu + 2^p M_iota M^p`, the growth bound of `grad V`.
    pub grad_growth: f64,
    pub l_delta: f64,
    /// `L_delta + eta1 + eta2 Ltilde_iota`, the local Lipschitz factor of `H`.
    pub lipschitz_h: f64,
    pub frak_c1: f64,
    pub frak_c2: f64,
    pub frak_c3: f64,
    pub ltilde_delta: f64,
    pub lambda_max_delta: f64,
    pub frak_m1: f64,
    pub frak_c1_delta_beta: f64,
    pub frak_c4: f64,
    pub ctilde_4: f64,
    pub c5_delta_beta: f64,
    pub c6: f64,
    pub k_radius: Option<f64>,
    pub radius_source: KRadius,
    /// `M#` when the surrogate radius was used.
    pub m_sharp: Option<f64>,
    c4: Option<f64>,
}

/// Evaluates every constant for `problem`, inverse temperature `beta`,
/// training samples `train` and the deterministic start `thetabar_0`.
pub fn compute_bundle<'a, M, I>(
    problem: &DroProblem<M>,
    beta: f64,
    train: I,
    thetabar_0: &ThetaBar,
    radius: KRadius,
) -> Result<ConstantsBundle>
where
    M: UtilityModel,
    I: IntoIterator<Item = &'a [f64]>,
{
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let params = *problem.params();
    let (p, eta1, eta2, delta) = (params.p, params.eta1, params.eta2, params.delta);
    let model = problem.model();
    let g = model.growth();
    let grid = problem.grid();
    let m = grid.m;
    let d = model.param_dim();
    let m_xi = grid.m_xi();
    let ktilde = model.ktilde_nabla(&grid.xi_box);
    let pen = dissipativity_constants();

    let (mut sum_e, mut sum_2p, mut count) = (0.0, 0.0, 0usize);
    for x in train {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = (1.0 + r).powf(2.0 * p);
        sum_2p += w;
        sum_e += (1.0 + w).powi(4);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let moment_e = sum_e / count as f64;
    let moment_2p = sum_2p / count as f64;
    let theta0_sq = thetabar_0.norm_sq();

    let one_m_nu = (1.0 + m_xi).powi(g.nu as i32);
    let m_p = m_xi.powf(p);
    let max1_mp = m_p.max(1.0);
    let two_p = 2f64.powf(p);
    let kn = g.k_nabla * one_m_nu;

    let min_eta = eta1.min(eta2 * pen.a_iota);
    let a = min_eta / 2.0;
    let grad_growth = kn + two_p * pen.m_iota * m_p;
    let b = eta2 * pen.b_iota + 2.0 * grad_growth * grad_growth / min_eta;

    let inner = kn + 2f64.powf(p - 1.0) * max1_mp * pen.m_iota;
    let l_delta = 2.0 * one_m_nu * (4.0 * g.k_nabla * inner / delta + g.l_nabla)
        + (two_p * pen.l_iota * max1_mp + 2f64.powf(p + 2.0) * pen.m_iota * max1_mp * inner / delta);
    let lipschitz_h = l_delta + eta1 + eta2 * pen.ltilde_iota;

    let frak_c1 = a.min(a.cbrt()) / (16.0 * moment_e.sqrt());
    let frak_c2 = (8.0 * kn + 2f64.powf(p + 2.0) * pen.m_iota * max1_mp)
        * (kn + 2f64.powf(p - 1.0) * pen.m_iota * max1_mp);
    let frak_c3 = 2.0 * g.l_nabla * one_m_nu + two_p * pen.l_iota * max1_mp + eta1 + eta2 * pen.ltilde_iota + 1.0;
    let ltilde_delta = frak_c2 / delta + frak_c3;
    let lambda_max_delta = (frak_c1 / (ltilde_delta * ltilde_delta)).min(1.0 / a);

    // M_Xi enters the middle term without the power p
    let m1_root = kn + two_p * pen.m_iota * m_xi + eta2 * iota(0.0) * iota_prime(0.0);
    let frak_m1 = m1_root * m1_root;
    let frak_c1_delta_beta = 2.0 * frak_m1 * lambda_max_delta + 2.0 * b + 2.0 * (d as f64 + 1.0) / beta;

    let frak_c4 = g.j_u * (1.0 + 2.0 * m_xi).powi(g.chi as i32)
        + 8.0 * p * ktilde / eta2.sqrt() * (1.0 + 4.0 * m_xi).powf(g.nu as f64 + p - 1.0);
    let ctilde_4 = g.j_u * (1.0 + m_xi).powi(g.chi as i32)
        + 4.0 * p / eta2.sqrt() * (1.0 + 4.0 * m_xi).powf(p - 1.0) * (1.0 + 2.0 * ktilde * one_m_nu)
        + 2f64.powf(p + 2.0) * p * m_xi / eta2 * (1.0 + 4.0 * m_xi).powf(p - 1.0);
    let c5_delta_beta = frak_c4 * frak_c1_delta_beta.sqrt() * (lambda_max_delta + 1.0 / a).sqrt();
    let c6 = frak_c4 * theta0_sq.sqrt();

    let (k_radius, m_sharp) = match radius {
        KRadius::Surrogate => {
            let m_sharp = problem.v_delta_full(thetabar_0)? + delta * (problem.n_points() as f64).ln();
            let qa = eta1.min(eta2) / 2.0;
            let qb = ktilde * one_m_nu + two_p * m_p;
            let qc = ktilde * one_m_nu + m_sharp;
            let disc = (qb * qb + 4.0 * qa * qc).max(0.0);
            let r = ((qb + disc.sqrt()) / (2.0 * qa)).max(thetabar_0.norm_sq().sqrt());
            (Some(r), Some(m_sharp))
        }
        KRadius::User(r) => {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("radius must be finite and nonnegative, got {r}")));
            }
            (Some(r), None)
        }
        KRadius::Unavailable => (None, None),
    };
    let c4 = k_radius.map(|r| {
        ctilde_4 + (g.j_u * (1.0 + 2.0 * m_xi).powi(g.chi as i32) + p * (1.0 + 4.0 * m_xi).powf(p - 1.0)) * (1.0 + r)
    });

    let xi_range = (
        grid.xi_box.lo.iter().copied().fold(f64::INFINITY, f64::min),
        grid.xi_box.hi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );

    Ok(ConstantsBundle {
        m,
        d,
        p,
        eta1,
        eta2,
        delta,
        beta,
        n_actual: problem.n_points(),
        k_nabla: g.k_nabla,
        ktilde_nabla: ktilde,
        l_nabla: g.l_nabla,
        nu: g.nu,
        j_u: g.j_u,
        chi: g.chi,
        m_xi,
        xi_range,
        a_iota: pen.a_iota,
        b_iota: pen.b_iota,
        l_iota: pen.l_iota,
        m_iota: pen.m_iota,
        ltilde_iota: pen.ltilde_iota,
        moment_e,
        moment_2p,
        theta0_sq,
        a,
        b,
        grad_growth,
        l_delta,
        lipschitz_h,
        frak_c1,
        frak_c2,
        frak_c3,
        ltilde_delta,
        lambda_max_delta,
        frak_m1,
        frak_c1_delta_beta,
        frak_c4,
        ctilde_4,
        c5_delta_beta,
        c6,
        k_radius,
        radius_source: radius,
        m_sharp,
        c4,
    })
}

impl ConstantsBundle {
    /// `C4`; needs a radius for the compact set.
    pub fn c4(&self) -> Result<f64> {
        self.c4.ok_or_else(|| Error::UnavailableConstant {
            name: "C4",
            reason: "no radius for the compact set was supplied and the surrogate is disabled".into(),
        })
    }

    /// `Ltilde_delta` at another smoothing level.
    pub fn ltilde_at(&self, delta: f64) -> f64 {
        self.frak_c2 / delta + self.frak_c3
    }

    /// `lambda_max` at another smoothing level.
    pub fn lambda_max_at(&self, delta: f64) -> f64 {
        let l = self.ltilde_at(delta);
        (self.frak_c1 / (l * l)).min(1.0 / self.a)
    }

    /// Right-hand side of the second-moment bound after `n` steps of size `lambda`.
    pub fn moment_bound(&self, n: usize, lambda: f64) -> f64 {
        (-self.a * lambda * (n as f64 + 1.0)).exp() * self.theta0_sq
            + self.frak_c1_delta_beta * (self.lambda_max_delta + 1.0 / self.a)
    }

    /// `(name, value)` pairs in report order.
    pub fn entries(&self) -> Result<Vec<(&'static str, String)>> {
        let c4 = self.c4()?;
        let f = |v: f64| v.to_string();
        let mut out = vec![
            ("m", self.m.to_string()),
            ("d", self.d.to_string()),
            ("p", f(self.p)),
            ("eta1", f(self.eta1)),
            ("eta2", f(self.eta2)),
            ("delta", f(self.delta)),
            ("beta", f(self.beta)),
            ("N_actual", self.n_actual.to_string()),
            ("K_nabla", f(self.k_nabla)),
            ("Ktilde_nabla", f(self.ktilde_nabla)),
            ("L_nabla", f(self.l_nabla)),
            ("nu", self.nu.to_string()),
            ("J_U", f(self.j_u)),
            ("chi", self.chi.to_string()),
            ("M_Xi", f(self.m_xi)),
            ("a_iota", f(self.a_iota)),
            ("b_iota", f(self.b_iota)),
            ("L_iota", f(self.l_iota)),
            ("M_iota", f(self.m_iota)),
            ("Ltilde_iota", f(self.ltilde_iota)),
            ("moment_E", f(self.moment_e)),
            ("moment_2p", f(self.moment_2p)),
            ("theta0_sq", f(self.theta0_sq)),
            ("a", f(self.a)),
            ("b", f(self.b)),
            ("grad_growth", f(self.grad_growth)),
            ("L_delta", f(self.l_delta)),
            ("lipschitz_H", f(self.lipschitz_h)),
            ("frakC1", f(self.frak_c1)),
            ("frakC2", f(self.frak_c2)),
            ("frakC3", f(self.frak_c3)),
            ("Ltilde_delta", f(self.ltilde_delta)),
            ("lambda_max_delta", f(self.lambda_max_delta)),
            ("frakM1", f(self.frak_m1)),
            ("frakc1_delta_beta", f(self.frak_c1_delta_beta)),
            ("frakC4", f(self.frak_c4)),
            ("Ctilde4", f(self.ctilde_4)),
            ("C5_delta_beta", f(self.c5_delta_beta)),
            ("C6", f(self.c6)),
        ];
        let source = match self.radius_source {
            KRadius::Surrogate => "surrogate",
            KRadius::User(_) => "user",
            KRadius::Unavailable => "none",
        };
        out.push(("K_radius_source", source.to_string()));
        if let Some(ms) = self.m_sharp {
            out.push(("M_sharp", f(ms)));
        }
        out.push(("K_radius", f(self.k_radius.expect("set with C4"))));
        out.push(("C4", f(c4)));
        Ok(out)
    }

    /// Flat `name=value` report, one constant per line.
    pub fn report(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.entries()? {
            let _ = writeln!(s, "{k}={v}");
        }
        Ok(s)
    }
}

/// Constants that come from the external convergence result and are never
/// computed here.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExternalConstants {
    pub c_delta_beta: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// Replaces the computed `C6`.
    pub c6_override: Option<f64>,
}

/// One selected parameter and the inequality that fixes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamChoice {
    pub name: &'static str,
    pub value: f64,
    /// The bound being respected.
    pub bound: f64,
    pub binding: String,
}

/// Theoretical parameters `(ell, jj, delta, beta, lambda, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Algorithm1Params {
    pub ell: u32,
    pub jj: u32,
    pub delta: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Integer-valued; can exceed every machine integer width.
    pub n: f64,
    pub choices: Vec<ParamChoice>,
}

impl Algorithm1Params {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.choices {
            let _ = writeln!(s, "{}={}  # {} (bound {})", c.name, readable(c.value), c.binding, readable(c.bound));
        }
        s
    }
}

fn readable(v: f64) -> String {
    if v != 0.0 && !(1e-4..1e15).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn argbest(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut k = 0;
    for (i, v) in values.iter().enumerate() {
        if better(*v, values[k]) {
            k = i;
        }
    }
    k
}

/// Selects `(ell, jj, delta, beta, lambda, n)` for target accuracy `epsilon`,
/// in that order, each as close to its strict bound as [`STRICT_MARGIN`]
/// allows (integers take the smallest admissible value).
pub fn algorithm1_params(epsilon: f64, bundle: &ConstantsBundle, ext: &ExternalConstants) -> Result<Algorithm1Params> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut blocked = Vec::new();
    let mut missing = Vec::new();
    if ext.c2.is_none() {
        blocked.push("step size lambda");
        missing.push("C2");
    }
    if ext.c_delta_beta.is_none() || ext.c1.is_none() {
        blocked.push("iteration count n");
        if ext.c_delta_beta.is_none() {
            missing.push("c_delta_beta");
        }
        if ext.c1.is_none() {
            missing.push("C1");
        }
    }
    if !blocked.is_empty() {
        return Err(Error::MissingExternal {
            step: blocked.join(", "),
            missing: missing.join(", "),
        });
    }
    let c4 = bundle.c4()?;
    let (c2, c, c1) = (ext.c2.unwrap(), ext.c_delta_beta.unwrap(), ext.c1.unwrap());
    let c6 = ext.c6_override.unwrap_or(bundle.c6);
    let m = bundle.m as f64;
    let dp1 = bundle.d as f64 + 1.0;
    let mut choices = Vec::new();

    let (lo, hi) = bundle.xi_range;
    let mut ell = 1u32;
    while !(-(2f64.powi(ell as i32 - 1)) <= lo && hi < 2f64.powi(ell as i32 - 1)) {
        ell += 1;
    }
    choices.push(ParamChoice {
        name: "ell",
        value: ell as f64,
        bound: 2f64.powi(ell as i32 - 1),
        binding: "smallest level whose grid box contains the data box".into(),
    });

    let jj_bound = (5.0 * m.sqrt() * (c4 + bundle.frak_c4 * (1.0 / bundle.a + 2.0 * bundle.b)) / epsilon).log2();
    let jj = if jj_bound < 1.0 { 1 } else { jj_bound.floor() as u32 + 1 };
    choices.push(ParamChoice {
        name: "jj",
        value: jj as f64,
        bound: jj_bound,
        binding: "jj > log2(5 sqrt(m) (C4 + frakC4 (1/a + 2b)) / eps)".into(),
    });

    let two_j = 2f64.powi(jj as i32);
    let d_terms = [
        epsilon / (10.0 * m * (ell + jj) as f64 * std::f64::consts::LN_2),
        bundle.frak_c2 / (bundle.a * bundle.frak_c1).sqrt(),
        bundle.frak_c2
            * (epsilon * two_j / (10.0 * bundle.frak_c1 * bundle.frak_c4 * (2.0 * bundle.frak_m1 + 1.0) * m.sqrt()))
                .sqrt(),
    ];
    let k = argbest(&d_terms, |x, y| x < y);
    let delta = d_terms[k] * (1.0 - STRICT_MARGIN);
    let d_names = [
        "delta < eps / (10 m (ell + jj) log 2)",
        "delta < frakC2 / sqrt(a frakC1)",
        "delta < frakC2 sqrt(eps 2^jj / (10 frakC1 frakC4 (2 frakM1 + 1) sqrt(m)))",
    ];
    choices.push(ParamChoice {
        name: "delta",
        value: delta,
        bound: d_terms[k],
        binding: d_names[k].into(),
    });

    let lt = bundle.ltilde_at(delta);
    let b_terms = [
        100.0 * dp1 / (epsilon * epsilon),
        10.0 * dp1 * (1.0 + ((lt - 1.0) * bundle.moment_2p / bundle.a).ln()) / epsilon,
        10.0 * m.sqrt() * bundle.frak_c4 * dp1 / (epsilon * two_j),
    ];
    let k = argbest(&b_terms, |x, y| x > y);
    let beta = b_terms[k] * (1.0 + STRICT_MARGIN);
    let b_names = [
        "beta > 100 (d+1) / eps^2",
        "beta > 10 (d+1) (1 + log((Ltilde_delta - 1) E[(1+|X0|)^{2p}] / a)) / eps",
        "beta > 10 sqrt(m) frakC4 (d+1) / (eps 2^jj)",
    ];
    choices.push(ParamChoice {
        name: "beta",
        value: beta,
        bound: b_terms[k],
        binding: b_names[k].into(),
    });

    let l_terms = [bundle.lambda_max_at(delta), epsilon.powi(4) / (625.0 * c2.powi(4))];
    let k = argbest(&l_terms, |x, y| x < y);
    let lambda = l_terms[k] * (1.0 - STRICT_MARGIN);
    let l_names = ["lambda < lambda_max_delta", "lambda < eps^4 / (625 C2^4)"];
    choices.push(ParamChoice {
        name: "lambda",
        value: lambda,
        bound: l_terms[k],
        binding: l_names[k].into(),
    });

    let n_terms = [
        4.0 / (c * lambda) * (10.0 * c1 / epsilon).ln(),
        2.0 / (bundle.a * lambda) * (10.0 * c6 / epsilon).ln() - 1.0,
    ];
    let k = argbest(&n_terms, |x, y| x > y);
    let n_bound = n_terms[k];
    let mut n = if n_bound < 1.0 { 1.0 } else { n_bound.floor() + 1.0 };
    if n <= n_bound {
        // past 2^53 the next integer is the next float
        n = f64::from_bits(n_bound.to_bits() + 1);
    }
    let n_names = [
        "n > 4 / (c_delta_beta lambda) log(10 C1 / eps)",
        "n > 2 / (a lambda) log(10 C6 / eps) - 1",
    ];
    choices.push(ParamChoice {
        name: "n",
        value: n,
        bound: n_bound,
        binding: n_names[k].into(),
    });

    Ok(Algorithm1Params {
        ell,
        jj,
        delta,
        beta,
        lambda,
        n,
        choices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoxRegion, GridSpec};
    use crate::model::RegressionNet;
    use crate::objective::DroParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle_for(eta1: f64, eta2: f64, delta: f64, radius: KRadius) -> ConstantsBundle {
        let rows = [vec![0.3, 0.6], vec![-0.7, 0.2], vec![1.1, 0.9]];
        let grid = GridSpec::new(2, 1, BoxRegion::cube(2, -1.5, 1.5).unwrap()).unwrap();
        let pb = DroProblem::from_samples(
            RegressionNet::new(2),
            DroParams { eta1, eta2, p: 2.0, delta },
            grid,
            rows.iter().map(|r| r.as_slice()),
        )
        .unwrap();
        let tb0 = ThetaBar::new(vec![-2.0, -2.0], 0.0);
        compute_bundle(&pb, 1e9, rows.iter().map(|r| r.as_slice()), &tb0, radius).unwrap()
    }

    #[test]
    fn a_from_table_values() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        assert_eq!(b.a, 5e-4);
        assert_eq!(b.a_iota, 0.5);
    }

    #[test]
    fn frak_m1_third_term_vanishes() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let direct = b.k_nabla * (1.0 + b.m_xi).powi(b.nu as i32) + 4.0 * b.m_iota * b.m_xi;
        assert!((b.frak_m1 - direct * direct).abs() <= 1e-12 * b.frak_m1);
    }

    #[test]
    fn plug_in_values() {
        let b = bundle_for(0.5, 1.5, 0.2, KRadius::User(3.0));
        // m = 2: K = 4, L = 12, nu = 3, J_U = 4, chi = 1; Xi = [-1.5, 1.5]^2
        let mx = 4.5f64.sqrt();
        let kn = 4.0 * (1.0 + mx).powi(3);
        let mp = 4.5;
        assert!((b.m_xi - mx).abs() < 1e-15);
        let min_eta = 0.5f64.min(0.75);
        let grad = kn + 4.0 * mp;
        assert!((b.b - (1.5 * b.b_iota + 2.0 * grad * grad / min_eta)).abs() < 1e-9 * b.b);
        let inner = kn + 2.0 * mp;
        let l_delta = 2.0 * (1.0 + mx).powi(3) * (16.0 * inner / 0.2 + 12.0) + (4.0 * mp + 16.0 * mp * inner / 0.2);
        assert!((b.l_delta - l_delta).abs() < 1e-9 * l_delta);
        let c2 = (8.0 * kn + 16.0 * mp) * (kn + 2.0 * mp);
        assert!((b.frak_c2 - c2).abs() < 1e-9 * c2);
        let c3 = 24.0 * (1.0 + mx).powi(3) + 4.0 * mp + 0.5 + 1.5 * b.ltilde_iota + 1.0;
        assert!((b.frak_c3 - c3).abs() < 1e-9 * c3);
        assert!((b.ltilde_delta - (c2 / 0.2 + c3)).abs() < 1e-9 * b.ltilde_delta);
        // Ktilde = max{4, max (y - 1/2)^2 on [-1.5, 1.5]} = 4
        assert_eq!(b.ktilde_nabla, 4.0);
        let c4f = 4.0 * (1.0 + 2.0 * mx) + 16.0 * 4.0 / 1.5f64.sqrt() * (1.0 + 4.0 * mx).powi(4);
        assert!((b.frak_c4 - c4f).abs() < 1e-9 * c4f);
        let ct4 = 4.0 * (1.0 + mx)
            + 8.0 / 1.5f64.sqrt() * (1.0 + 4.0 * mx) * (1.0 + 8.0 * (1.0 + mx).powi(3))
            + 32.0 * mx / 1.5 * (1.0 + 4.0 * mx);
        assert!((b.ctilde_4 - ct4).abs() < 1e-9 * ct4);
        let c4 = ct4 + (4.0 * (1.0 + 2.0 * mx) + 2.0 * (1.0 + 4.0 * mx)) * 4.0;
        assert!((b.c4().unwrap() - c4).abs() < 1e-9 * c4);
        assert!((b.c6 - c4f * 8f64.sqrt()).abs() < 1e-9 * b.c6);
        let c5 = c4f * b.frak_c1_delta_beta.sqrt() * (b.lambda_max_delta + 1.0 / b.a).sqrt();
        assert!((b.c5_delta_beta - c5).abs() < 1e-9 * c5);
        assert_eq!(b.lambda_max_delta, (b.frak_c1 / b.ltilde_delta.powi(2)).min(1.0 / b.a));
    }

    #[test]
    fn moments_are_exact_sums() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let rows = [[0.3f64, 0.6], [-0.7, 0.2], [1.1, 0.9]];
        let w: Vec<f64> = rows.iter().map(|r| (1.0 + (r[0] * r[0] + r[1] * r[1]).sqrt()).powi(4)).collect();
        let e2p = w.iter().sum::<f64>() / 3.0;
        let e = w.iter().map(|v| (1.0 + v).powi(4)).sum::<f64>() / 3.0;
        assert!((b.moment_2p - e2p).abs() < 1e-12 * e2p);
        assert!((b.moment_e - e).abs() < 1e-12 * e);
    }

    #[test]
    fn lambda_max_shrinks_with_delta() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let mut prev = f64::INFINITY;
        for delta in [1.0, 0.5, 0.1, 0.01, 0.001] {
            let l = b.lambda_max_at(delta);
            assert!(l <= prev);
            prev = l;
        }
        assert!(b.lambda_max_at(0.01) < b.lambda_max_at(1.0));
        let other = bundle_for(1e-3, 2.0, 0.01, KRadius::Surrogate);
        assert!(other.lambda_max_delta < b.lambda_max_delta);
        assert_eq!(other.lambda_max_delta, b.lambda_max_at(0.01));
    }

    #[test]
    fn b_monotone_in_eta2() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let eta1 = rng.random_range(0.1..10.0);
            // eta2 a_iota below eta1: the quadratic term dominates and b falls as eta2 grows
            let e_lo = rng.random_range(0.01..eta1);
            let e_hi = rng.random_range(e_lo..2.0 * eta1);
            let b_lo = bundle_for(eta1, e_lo, 0.1, KRadius::Unavailable).b;
            let b_hi = bundle_for(eta1, e_hi, 0.1, KRadius::Unavailable).b;
            assert!(b_hi < b_lo, "eta1={eta1} {e_lo}->{e_hi}: {b_lo} vs {b_hi}");
            // eta2 a_iota above eta1: only eta2 b_iota changes
            let f_lo = rng.random_range(2.0 * eta1..4.0 * eta1);
            let f_hi = f_lo * 2.0;
            let g_lo = bundle_for(eta1, f_lo, 0.1, KRadius::Unavailable).b;
            let g_hi = bundle_for(eta1, f_hi, 0.1, KRadius::Unavailable).b;
            let slope = (g_hi - g_lo) / (f_hi - f_lo);
            assert!((slope - 0.190_591).abs() < 1e-3 * g_lo.max(1.0), "{slope}");
        }
    }

    #[test]
    fn bundle_is_deterministic_and_reports() {
        let a = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        assert_eq!(a, b);
        let rep = a.report().unwrap();
        for key in ["a=", "b=", "lambda_max_delta=", "C4=", "C6=", "moment_E="] {
            assert!(rep.lines().any(|l| l.starts_with(key)), "{key}");
        }
        assert!(rep.lines().all(|l| l.split_once('=').is_some()));
    }

    #[test]
    fn c4_needs_a_radius() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Unavailable);
        assert!(matches!(b.c4(), Err(Error::UnavailableConstant { name: "C4", .. })));
        assert!(b.report().is_err());
        let s = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let u = bundle_for(1e-3, 2.0, 0.1, KRadius::User(1.0));
        assert!(s.k_radius.unwrap() > 1.0);
        assert!(s.c4().unwrap() > u.c4().unwrap());
    }

    #[test]
    fn surrogate_radius_solves_its_quadratic() {
        let b = bundle_for(0.3, 2.0, 0.1, KRadius::Surrogate);
        let r = b.k_radius.unwrap();
        let k = b.ktilde_nabla * (1.0 + b.m_xi).powi(b.nu as i32);
        let lhs = 0.15 * r * r - (k + 4.0 * b.m_xi.powi(2)) * r - k;
        assert!((lhs - b.m_sharp.unwrap()).abs() < 1e-6 * lhs.abs().max(1.0));
    }

    fn ext() -> ExternalConstants {
        ExternalConstants {
            c_delta_beta: Some(1e-3),
            c1: Some(10.0),
            c2: Some(5.0),
            c6_override: None,
        }
    }

    #[test]
    fn params_respect_every_inequality() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let eps = 0.05;
        let p = algorithm1_params(eps, &b, &ext()).unwrap();
        assert_eq!(p.ell, 2);
        let m = 2.0f64;
        let x = 5.0 * m.sqrt() * (b.c4().unwrap() + b.frak_c4 * (1.0 / b.a + 2.0 * b.b)) / eps;
        assert!((p.jj as f64) > x.log2() && (p.jj as f64 - 1.0) <= x.log2());
        assert!(p.delta < eps / (10.0 * m * (p.ell + p.jj) as f64 * 2f64.ln()));
        assert!(p.delta < b.frak_c2 / (b.a * b.frak_c1).sqrt());
        assert!(p.beta > 100.0 * 3.0 / (eps * eps));
        assert!(p.lambda < b.lambda_max_at(p.delta));
        assert!(p.lambda < eps.powi(4) / (625.0 * 5f64.powi(4)));
        let t1 = 4.0 / (1e-3 * p.lambda) * (100.0 / eps).ln();
        let t2 = 2.0 / (b.a * p.lambda) * (10.0 * b.c6 / eps).ln() - 1.0;
        assert!(p.n > t1.max(t2) && p.n.fract() == 0.0);
        assert_eq!(p.choices.len(), 6);
        assert!(p.render().lines().count() == 6);
    }

    #[test]
    fn jj_steps_by_one_when_epsilon_halves() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let mut steps = Vec::new();
        for k in 0..6 {
            let eps = 0.5f64.powi(k);
            steps.push(algorithm1_params(eps, &b, &ext()).unwrap().jj);
        }
        for w in steps.windows(2) {
            assert_eq!(w[1], w[0] + 1);
        }
    }

    #[test]
    fn missing_externals_name_the_blocked_steps() {
        let b = bundle_for(1e-3, 2.0, 0.1, KRadius::Surrogate);
        let err = algorithm1_params(0.1, &b, &ExternalConstants { c2: None, ..ext() }).unwrap_err();
        match err {
            Error::MissingExternal { step, missing } => {
                assert_eq!(step, "step size lambda");
                assert_eq!(missing, "C2");
            }
            e => panic!("{e}"),
        }
        let err = algorithm1_params(0.1, &b, &ExternalConstants::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda") && msg.contains("iteration count n") && msg.contains("C1"));
        assert!(algorithm1_params(0.0, &b, &ext()).is_err());
        let none = bundle_for(1e-3, 2.0, 0.1, KRadius::Unavailable);
        assert!(matches!(algorithm1_params(0.1, &none, &ext()), Err(Error::UnavailableConstant { .. })));
    }
}
