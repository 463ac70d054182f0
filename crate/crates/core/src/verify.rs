//! Self-checks run by the `verify` command and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::constants::{compute_bundle, KRadius};
use crate::error::{Error, Result};
use crate::experiment::{make_seed_data, robust_problem, CorruptionNoise, ExperimentConfig};
use crate::model::{RegressionNet, UtilityModel};
use crate::objective::{DroParams, DroProblem, ThetaBar, Workspace};
use crate::oracle::{duality_gap, identity_instance, quadrature_study, TinyInstance};

pub const DUALITY_GAP_LIMIT: f64 = 2e-3;
pub const GRADIENT_RTOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
pub const SLOPE_LIMIT: f64 = -0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Duality,
    Sandwich,
    Dissipativity,
    Gradient,
    Quadrature,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Duality,
        Suite::Sandwich,
        Suite::Dissipativity,
        Suite::Gradient,
        Suite::Quadrature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Sandwich => "sandwich",
            Suite::Dissipativity => "dissipativity",
            Suite::Gradient => "gradient",
            Suite::Quadrature => "quadrature",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::InvalidArgument(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Problem the sandwich, dissipativity and gradient suites run on.
    pub config: ExperimentConfig,
    /// Test hook: adds `c (1 + |H_i|)` to every drift component before the
    /// gradient comparison. Zero disables it.
    pub gradient_corruption: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            config: ExperimentConfig::default(),
            gradient_corruption: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: usize,
    pub failures: usize,
    /// Largest observed value of the checked quantity, normalised so that
    /// the check passes iff it is at most the limit.
    pub worst: f64,
    pub limit: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {}: {}/{} checks passed, worst {:.3e} (limit {:.3e}){}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.checks - self.failures,
            self.checks,
            self.worst,
            self.limit,
            if self.detail.is_empty() { String::new() } else { format!("; {}", self.detail) }
        )
    }
}

struct Tally {
    checks: usize,
    failures: usize,
    worst: f64,
    limit: f64,
}

impl Tally {
    fn new(limit: f64) -> Self {
        Self {
            checks: 0,
            failures: 0,
            worst: f64::NEG_INFINITY,
            limit,
        }
    }

    fn add(&mut self, value: f64) {
        self.checks += 1;
        if !(value <= self.limit) {
            self.failures += 1;
        }
        if value > self.worst || value.is_nan() {
            self.worst = value;
        }
    }

    fn report(self, suite: Suite, detail: String) -> SuiteReport {
        SuiteReport {
            suite,
            checks: self.checks,
            failures: self.failures,
            worst: self.worst,
            limit: self.limit,
            detail,
        }
    }
}

/// The training problem of the first repeat at the largest `eta2`.
pub fn verification_problem(cfg: &ExperimentConfig) -> Result<DroProblem<RegressionNet>> {
    cfg.validate()?;
    let seed = cfg.seeds.first().copied().unwrap_or(1);
    let data = make_seed_data(cfg, seed, CorruptionNoise::default())?;
    let eta2 = cfg.eta2_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    robust_problem(cfg, &data, eta2)
}

fn random_thetabar<R: Rng + ?Sized>(rng: &mut R, dim: usize, max_norm: f64) -> ThetaBar {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = max_norm * rng.random::<f64>();
    for x in &mut v {
        *x *= r / norm;
    }
    ThetaBar::from_flat(&v).expect("dim >= 2")
}

fn random_point<R: Rng + ?Sized, M: UtilityModel>(rng: &mut R, problem: &DroProblem<M>) -> Vec<f64> {
    let b = &problem.grid().xi_box;
    b.lo.iter().zip(&b.hi).map(|(l, h)| rng.random_range(*l..=*h)).collect()
}

/// Gap between primal and dual on 100 random three-point instances, plus the
/// identity instance and both `eta2` extremes.
pub fn duality_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut t = Tally::new(DUALITY_GAP_LIMIT);
    for k in 0..100 {
        let eta2 = 10f64.powf(rng.random_range(-1.5..1.5));
        let p = if k % 3 == 0 { 1.0 } else { 2.0 };
        let inst = TinyInstance::random(&mut rng, 3, 1 + k % 2, eta2, p)?;
        t.add(duality_gap(&inst));
    }
    for eta2 in [1e-6, 1e6] {
        let inst = TinyInstance { eta2, ..TinyInstance::random(&mut rng, 3, 2, 1.0, 2.0)? };
        t.add(duality_gap(&inst));
    }
    t.add(duality_gap(&identity_instance(0.5)));
    Ok(t.report(Suite::Duality, String::new()))
}

/// `V^delta <= max_j s_j <= V^delta + delta log N` on 100 random points per
/// smoothing level `delta` in `{0.01, 0.1, 1}`. The reported quantity is the
/// worst violation of either side.
pub fn sandwich_suite(problem: &DroProblem<RegressionNet>, opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5a);
    let mut t = Tally::new(0.0);
    let log_n = (problem.n_points() as f64).ln();
    let dim = problem.model().param_dim() + 1;
    for delta in [0.01, 0.1, 1.0] {
        let pb = problem.with_params(DroParams { delta, ..*problem.params() })?;
        for _ in 0..100 {
            let tb = random_thetabar(&mut rng, dim, 10.0);
            let x = random_point(&mut rng, &pb);
            let v = pb.smoothed_value(&tb, &x);
            let hard = (0..pb.n_points())
                .map(|j| pb.score(&tb, &x, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * hard.abs().max(1.0);
            t.add((v - hard - slack).max(hard - v - delta * log_n - slack));
        }
    }
    Ok(t.report(Suite::Sandwich, format!("N = {}", problem.n_points())))
}

/// `<thetabar, H(thetabar, x)> >= a |thetabar|^2 - b` on `10^4` draws with
/// `|thetabar| <= 100` and `x` uniform on the data box. Reports the worst
/// `a |thetabar|^2 - b - <thetabar, H>`.
pub fn dissipativity_suite(problem: &DroProblem<RegressionNet>, opts: &VerifyOptions) -> Result<SuiteReport> {
    let cfg = &opts.config;
    let bundle = compute_bundle(
        problem,
        cfg.beta,
        problem.mu_disc().atoms().map(|(x, _)| x),
        &cfg.thetabar_0(),
        KRadius::Unavailable,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd1);
    let mut t = Tally::new(0.0);
    let dim = problem.model().param_dim() + 1;
    let mut ws = Workspace::default();
    let mut h = vec![0.0; dim];
    for _ in 0..10_000 {
        let tb = random_thetabar(&mut rng, dim, 100.0);
        let x = random_point(&mut rng, problem);
        problem.stochastic_gradient_into(&tb, &x, &mut ws, &mut h);
        let inner: f64 = tb.to_flat().iter().zip(&h).map(|(a, b)| a * b).sum();
        t.add(bundle.a * tb.norm_sq() - bundle.b - inner);
    }
    let needed = t.worst + bundle.b;
    Ok(t.report(
        Suite::Dissipativity,
        format!("a = {:.3e}, b = {:.6e}, smallest b the draws need {needed:.3e}", bundle.a, bundle.b),
    ))
}

/// Central differences of `Vtilde` against `H` at 20 random points. Reports
/// the worst `|H - fd| / max(|fd|, 1)`.
pub fn gradient_suite(problem: &DroProblem<RegressionNet>, opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e);
    let mut t = Tally::new(GRADIENT_RTOL);
    let dim = problem.model().param_dim() + 1;
    for _ in 0..20 {
        let tb = random_thetabar(&mut rng, dim, 3.0);
        let x = random_point(&mut rng, problem);
        let mut g = problem.stochastic_gradient(&tb, &x);
        if opts.gradient_corruption != 0.0 {
            for v in &mut g {
                *v += opts.gradient_corruption * (1.0 + v.abs());
            }
        }
        let flat = tb.to_flat();
        let fd: Vec<f64> = (0..dim)
            .map(|i| {
                let mut up = flat.clone();
                let mut down = flat.clone();
                up[i] += FD_STEP;
                down[i] -= FD_STEP;
                let fu = problem.tilde_value(&ThetaBar::from_flat(&up).expect("dim >= 2"), &x);
                let fl = problem.tilde_value(&ThetaBar::from_flat(&down).expect("dim >= 2"), &x);
                (fu - fl) / (2.0 * FD_STEP)
            })
            .collect();
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        t.add(err / scale);
    }
    Ok(t.report(Suite::Gradient, String::new()))
}

/// Least-squares slope of `log2 |u_jj - u_{jj+3}|` over `jj = 2..=8` for the
/// fixed one-dimensional instance.
pub fn quadrature_suite(_: &VerifyOptions) -> Result<SuiteReport> {
    let study = quadrature_study(0.3, 2..=8, 3)?;
    let mut t = Tally::new(SLOPE_LIMIT);
    t.add(study.slope);
    let diffs: Vec<String> = study.differences.iter().map(|d| format!("{d:.2e}")).collect();
    Ok(t.report(Suite::Quadrature, format!("differences {}", diffs.join(" "))))
}

/// Runs the requested suites in order, building the shared problem once.
pub fn run_suites(suites: &[Suite], opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let needs_problem = suites
        .iter()
        .any(|s| matches!(s, Suite::Sandwich | Suite::Dissipativity | Suite::Gradient));
    let problem = if needs_problem {
        Some(verification_problem(&opts.config)?)
    } else {
        None
    };
    suites
        .iter()
        .map(|s| {
            let pb = || problem.as_ref().expect("built above");
            match s {
                Suite::Duality => duality_suite(opts),
                Suite::Sandwich => sandwich_suite(pb(), opts),
                Suite::Dissipativity => dissipativity_suite(pb(), opts),
                Suite::Gradient => gradient_suite(pb(), opts),
                Suite::Quadrature => quadrature_suite(opts),
            }
        })
        .collect()
}
