//! Corrupted-regression study: synthetic data, robust and vanilla training
//! runs, per-run metrics and the summary table.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxRegion, GridSpec};
use crate::model::RegressionNet;
use crate::objective::{DroParams, DroProblem, ThetaBar};
use crate::sgld::{self, EmpiricalSampler, Monitor, RecordValues, SgldConfig};

/// Half-width of the data box `Xi = [-3, 3]^m`.
pub const XI_HALF_WIDTH: f64 = 3.0;

/// Relative half-width of the reference band.
pub const BAND_WIDTH: f64 = 0.01;

/// Valid configuration keys, in file order.
pub const CONFIG_KEYS: [&str; 18] = [
    "m",
    "p",
    "eta1",
    "eta2_list",
    "delta",
    "beta",
    "lambda",
    "n_iter",
    "ell",
    "jj",
    "theta_star",
    "theta_bar_0",
    "q",
    "n_train",
    "n_test",
    "seeds",
    "snap_samples",
    "record_every",
];

/// Regression data; each row is `(z_1, .., z_{m-1}, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    rows: Vec<f64>,
    corrupt: Vec<bool>,
    /// Bernoulli draw used for the clean response of each row.
    coin: Vec<bool>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.corrupt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupt.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.rows.chunks_exact(self.m)
    }

    pub fn is_corrupt(&self, i: usize) -> bool {
        self.corrupt[i]
    }

    pub fn corrupt_count(&self) -> usize {
        self.corrupt.iter().filter(|c| **c).count()
    }

    /// Clips every row into `xi_box`; returns the number of rows changed.
    pub fn clip_into(&mut self, xi_box: &BoxRegion) -> usize {
        let m = self.m;
        self.rows.chunks_exact_mut(m).map(|r| xi_box.clamp(r)).filter(|c| *c).count()
    }
}

/// Clean data: `z ~ U[-1, 1]^{m-1}` and `y = N(theta*, z) + noise_scale * B`
/// with `B ~ Bernoulli(1/2)`.
pub fn generate_clean(count: usize, theta_star: &[f64], noise_scale: f64, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one row".into()));
    }
    if theta_star.len() < 2 {
        return Err(Error::InvalidArgument("theta_star needs at least two entries".into()));
    }
    let m = theta_star.len();
    let net = RegressionNet::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count * m);
    let mut coin = Vec::with_capacity(count);
    let mut z = vec![0.0; m - 1];
    for _ in 0..count {
        for v in z.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        let b = rng.random_bool(0.5);
        let y = net.predict(theta_star, &z) + if b { noise_scale } else { 0.0 };
        rows.extend_from_slice(&z);
        rows.push(y);
        coin.push(b);
    }
    Ok(Dataset {
        m,
        rows,
        corrupt: vec![false; count],
        coin,
    })
}

/// How the response offset of a corrupted row is drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CorruptionNoise {
    /// A fresh Bernoulli(1/2) draw.
    #[default]
    Fresh,
    /// The Bernoulli draw already used for the row's clean response.
    Reuse,
}

/// Replaces each row with probability `q` by `z ~ U[2, 2.5]^{m-1}` and
/// `y + B`.
pub fn corrupt(data: &Dataset, q: f64, seed: u64, noise: CorruptionNoise) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("q must lie in [0, 1], got {q}")));
    }
    let mut out = data.clone();
    let m = data.m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..data.len() {
        let u: f64 = rng.random();
        if u < 1.0 - q {
            continue;
        }
        let row = &mut out.rows[i * m..(i + 1) * m];
        for v in row[..m - 1].iter_mut() {
            *v = rng.random_range(2.0..=2.5);
        }
        let b = match noise {
            CorruptionNoise::Fresh => rng.random_bool(0.5),
            CorruptionNoise::Reuse => data.coin[i],
        };
        if b {
            row[m - 1] += 1.0;
        }
        out.corrupt[i] = true;
    }
    Ok(out)
}

/// `(1/|D|) sum (y - N(theta, z))^2`.
pub fn test_mse(theta: &[f64], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let net = RegressionNet::new(data.m);
    let k = data.m - 1;
    let total: f64 = data
        .rows()
        .map(|r| {
            let e = r[k] - net.predict(theta, &r[..k]);
            e * e
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// `[(1 - 1%) ref, (1 + 1%) ref]`.
pub fn reference_band(reference: f64) -> (f64, f64) {
    ((1.0 - BAND_WIDTH) * reference, (1.0 + BAND_WIDTH) * reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub m: usize,
    pub p: f64,
    pub eta1: f64,
    pub eta2_list: Vec<f64>,
    pub delta: f64,
    pub beta: f64,
    pub lambda: f64,
    pub n_iter: usize,
    pub ell: u32,
    pub jj: u32,
    pub theta_star: Vec<f64>,
    pub theta_bar_0: Vec<f64>,
    pub q: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub snap_samples: bool,
    pub record_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            m: 4,
            p: 2.0,
            eta1: 1e-3,
            eta2_list: vec![0.01, 0.1, 0.5, 1.0, 1.5, 2.0],
            delta: 0.1,
            beta: 1e9,
            lambda: 0.01,
            n_iter: 25_000,
            ell: 3,
            jj: 1,
            theta_star: vec![-0.5, 0.5, 0.1, -0.2],
            theta_bar_0: vec![-2.0, -2.0, -2.0, -2.0, 0.0],
            q: 0.3,
            n_train: 10_000,
            n_test: 5_000,
            seeds: vec![1, 2, 3, 4, 5],
            snap_samples: false,
            record_every: 10,
        }
    }
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!(
        "unknown key `{key}`; valid keys are: {}",
        CONFIG_KEYS.join(", ")
    ))
}

impl ExperimentConfig {
    /// Parses a config file. Keys missing from the file keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (k, v) in table {
            cfg.set(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override; the value uses config file syntax.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(unknown_key(key));
        }
        let parsed: toml::Table = toml::from_str(&format!("v = {}", value.trim()))
            .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        self.set(key, parsed["v"].clone())
    }

    fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(unknown_key(key));
        }
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        // integers are accepted where floats are expected
        let value = match (&table[key], value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::Array(_), toml::Value::Array(items)) if key != "seeds" => toml::Value::Array(
                items
                    .into_iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        other => other,
                    })
                    .collect(),
            ),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if self.theta_star.len() != self.m {
            return bad(format!("theta_star needs {} entries", self.m));
        }
        if self.theta_bar_0.len() != self.m + 1 {
            return bad(format!("theta_bar_0 needs {} entries", self.m + 1));
        }
        if self.eta2_list.is_empty() || self.eta2_list.iter().any(|e| !(*e > 0.0)) {
            return bad("eta2_list must be a non-empty list of positive numbers".into());
        }
        if !(self.eta1 > 0.0 && self.delta > 0.0 && self.p >= 1.0) {
            return bad("need eta1 > 0, delta > 0 and p >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.q) {
            return bad(format!("q must lie in [0, 1], got {}", self.q));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.sgld_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.grid().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.ell, self.jj, BoxRegion::cube(self.m, -XI_HALF_WIDTH, XI_HALF_WIDTH)?)
    }

    pub fn dro_params(&self, eta2: f64) -> DroParams {
        DroParams {
            eta1: self.eta1,
            eta2,
            p: self.p,
            delta: self.delta,
        }
    }

    pub fn sgld_config(&self, seed: u64) -> SgldConfig {
        SgldConfig {
            lambda: self.lambda,
            beta: self.beta,
            n_iter: self.n_iter,
            seed,
            snap_samples: self.snap_samples,
            record_every: self.record_every,
        }
    }

    pub fn thetabar_0(&self) -> ThetaBar {
        ThetaBar::from_flat(&self.theta_bar_0).expect("validated length")
    }
}

/// Training method of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Robust { eta2: f64 },
    Vanilla,
}

impl Method {
    /// `robust-<eta2>` or `vanilla`; used in file names and tables.
    pub fn label(&self) -> String {
        match self {
            Method::Robust { eta2 } => format!("robust-{eta2}"),
            Method::Vanilla => "vanilla".into(),
        }
    }

    pub fn eta2(&self) -> Option<f64> {
        match self {
            Method::Robust { eta2 } => Some(*eta2),
            Method::Vanilla => None,
        }
    }
}

/// Options that are not part of the config file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub corruption: CorruptionNoise,
    /// Evaluate the smoothed objective at each record (robust runs only).
    pub trace_v_delta: bool,
    /// Record wall-clock times; when off every time column reads 0.
    pub wall_clock: bool,
    /// Run repeats on the rayon pool.
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            corruption: CorruptionNoise::Fresh,
            trace_v_delta: true,
            wall_clock: true,
            parallel: true,
        }
    }
}

/// Training and test data of one repeat.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub reference: f64,
    /// Training rows clipped into the data box.
    pub clipped: usize,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the corrupted training set and the clean test set for `seed`.
pub fn make_seed_data(cfg: &ExperimentConfig, seed: u64, noise: CorruptionNoise) -> Result<SeedData> {
    let clean = generate_clean(cfg.n_train, &cfg.theta_star, 0.1, derive_seed(seed, 1))?;
    let mut train = corrupt(&clean, cfg.q, derive_seed(seed, 2), noise)?;
    let clipped = train.clip_into(&cfg.grid()?.xi_box);
    let test = generate_clean(cfg.n_test, &cfg.theta_star, 0.1, derive_seed(seed, 3))?;
    let reference = test_mse(&cfg.theta_star, &test)?;
    Ok(SeedData {
        seed,
        train,
        test,
        reference,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub v_delta: Option<f64>,
    pub test_mse: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub reference: f64,
    pub final_mse: f64,
    /// Test loss closest to the reference over all iterations.
    pub best_mse: f64,
    /// First iteration whose test loss lies in the reference band.
    pub n_es: Option<usize>,
    pub time_to_band_s: Option<f64>,
    pub mse_at_nes: Option<f64>,
    pub wall_time_s: f64,
    pub trace: Vec<TraceRow>,
    pub final_state: Vec<f64>,
}

impl RunMetrics {
    pub fn v_delta_trace(&self) -> Vec<(usize, f64)> {
        self.trace.iter().filter_map(|r| r.v_delta.map(|v| (r.iter, v))).collect()
    }

    pub fn mse_trace(&self) -> Vec<(usize, f64)> {
        self.trace.iter().map(|r| (r.iter, r.test_mse)).collect()
    }
}

/// Tracks test loss at every iteration and fills the trace at records.
struct ExperimentMonitor<'a> {
    model: RegressionNet,
    test: &'a Dataset,
    reference: f64,
    band: (f64, f64),
    problem: Option<&'a DroProblem<RegressionNet>>,
    d: usize,
    start: Option<Instant>,
    overhead: f64,
    current_mse: f64,
    best_mse: f64,
    n_es: Option<usize>,
    time_to_band: Option<f64>,
    mse_at_nes: Option<f64>,
    trace: Vec<TraceRow>,
}

impl<'a> ExperimentMonitor<'a> {
    fn new(test: &'a Dataset, reference: f64, problem: Option<&'a DroProblem<RegressionNet>>, wall_clock: bool) -> Self {
        Self {
            model: RegressionNet::new(test.dim()),
            test,
            reference,
            band: reference_band(reference),
            problem,
            d: test.dim(),
            start: wall_clock.then(Instant::now),
            overhead: 0.0,
            current_mse: f64::NAN,
            best_mse: f64::NAN,
            n_es: None,
            time_to_band: None,
            mse_at_nes: None,
            trace: Vec::new(),
        }
    }

    fn elapsed(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64() - self.overhead)
    }

    fn mse(&self, theta: &[f64]) -> f64 {
        let k = self.d - 1;
        let total: f64 = self
            .test
            .rows()
            .map(|r| {
                let e = r[k] - self.model.predict(theta, &r[..k]);
                e * e
            })
            .sum();
        total / self.test.len() as f64
    }
}

impl Monitor for ExperimentMonitor<'_> {
    fn step(&mut self, iter: usize, state: &[f64]) {
        let t0 = self.start.map(|_| Instant::now());
        let mse = self.mse(&state[..self.d]);
        self.current_mse = mse;
        if !(self.best_mse - self.reference).abs().le(&(mse - self.reference).abs()) {
            self.best_mse = mse;
        }
        if let Some(t0) = t0 {
            self.overhead += t0.elapsed().as_secs_f64();
        }
        if self.n_es.is_none() && mse >= self.band.0 && mse <= self.band.1 {
            self.n_es = Some(iter);
            self.mse_at_nes = Some(mse);
            self.time_to_band = Some(self.elapsed());
        }
    }

    fn record(&mut self, iter: usize, state: &[f64]) -> RecordValues {
        let t0 = self.start.map(|_| Instant::now());
        let v_delta = self.problem.map(|pb| {
            let tb = ThetaBar::from_flat(state).expect("robust state");
            pb.v_delta_full(&tb).expect("non-empty measure")
        });
        if let Some(t0) = t0 {
            self.overhead += t0.elapsed().as_secs_f64();
        }
        self.trace.push(TraceRow {
            iter,
            v_delta,
            test_mse: self.current_mse,
            elapsed_s: self.elapsed(),
        });
        RecordValues {
            v_delta,
            test_loss: Some(self.current_mse),
        }
    }
}

fn finish(
    method: Method,
    data: &SeedData,
    mon: ExperimentMonitor<'_>,
    traj: sgld::Trajectory,
) -> RunMetrics {
    RunMetrics {
        method,
        seed: data.seed,
        reference: data.reference,
        final_mse: mon.current_mse,
        best_mse: mon.best_mse,
        n_es: mon.n_es,
        time_to_band_s: mon.time_to_band,
        mse_at_nes: mon.mse_at_nes,
        wall_time_s: mon.elapsed(),
        trace: mon.trace,
        final_state: traj.final_state,
    }
}

/// The discretised problem at `eta2` on one repeat's training data.
pub fn robust_problem(cfg: &ExperimentConfig, data: &SeedData, eta2: f64) -> Result<DroProblem<RegressionNet>> {
    DroProblem::from_samples(
        RegressionNet::new(cfg.m),
        cfg.dro_params(eta2),
        cfg.grid()?,
        data.train.rows(),
    )
}

/// Trains robust SGLD at `eta2` on one repeat's data.
pub fn run_robust_on(cfg: &ExperimentConfig, data: &SeedData, eta2: f64, opts: &RunOptions) -> Result<RunMetrics> {
    let problem = robust_problem(cfg, data, eta2)?;
    run_robust_with(cfg, data, &problem, opts)
}

/// Trains robust SGLD with a prebuilt problem.
pub fn run_robust_with(
    cfg: &ExperimentConfig,
    data: &SeedData,
    problem: &DroProblem<RegressionNet>,
    opts: &RunOptions,
) -> Result<RunMetrics> {
    let sampler = EmpiricalSampler::new(data.train.rows())?;
    let traced = opts.trace_v_delta.then_some(problem);
    let mut mon = ExperimentMonitor::new(&data.test, data.reference, traced, opts.wall_clock);
    let sgld_cfg = cfg.sgld_config(derive_seed(data.seed, 10));
    let traj = sgld::run_robust(problem, &sampler, &sgld_cfg, &cfg.thetabar_0(), &mut mon)?;
    let eta2 = problem.params().eta2;
    Ok(finish(Method::Robust { eta2 }, data, mon, traj))
}

/// Trains vanilla SGLD on one repeat's data, starting from the `theta` part
/// of `theta_bar_0`.
pub fn run_vanilla_on(cfg: &ExperimentConfig, data: &SeedData, opts: &RunOptions) -> Result<RunMetrics> {
    let sampler = EmpiricalSampler::new(data.train.rows())?;
    let mut mon = ExperimentMonitor::new(&data.test, data.reference, None, opts.wall_clock);
    let sgld_cfg = cfg.sgld_config(derive_seed(data.seed, 11));
    let net = RegressionNet::new(cfg.m);
    let traj = sgld::run_vanilla(&net, &sampler, &sgld_cfg, &cfg.theta_bar_0[..cfg.m], &mut mon)?;
    Ok(finish(Method::Vanilla, data, mon, traj))
}

/// Outcome of one (method, seed) job. Failed runs keep their error.
#[derive(Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub result: Result<RunMetrics>,
}

/// All methods in table order: robust runs in `eta2_list` order, then vanilla.
pub fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut out: Vec<Method> = cfg.eta2_list.iter().map(|&eta2| Method::Robust { eta2 }).collect();
    out.push(Method::Vanilla);
    out
}

/// Runs every method on every seed. Divergent runs are reported in their
/// outcome and do not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, methods: &[Method], opts: &RunOptions) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let data: Vec<SeedData> = cfg
        .seeds
        .iter()
        .map(|&s| make_seed_data(cfg, s, opts.corruption))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Method, &SeedData)> = methods
        .iter()
        .flat_map(|m| data.iter().map(move |d| (*m, d)))
        .collect();
    let run = |(method, d): &(Method, &SeedData)| RunOutcome {
        method: *method,
        seed: d.seed,
        result: match method {
            Method::Robust { eta2 } => run_robust_on(cfg, d, *eta2, opts),
            Method::Vanilla => run_vanilla_on(cfg, d, opts),
        },
    };
    Ok(if opts.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub eta2: Option<f64>,
    pub runs: usize,
    pub hits: usize,
    pub avg_train_time_s: f64,
    /// Largest per-run `n_es`, present only when every run reached the band.
    pub n_es: Option<usize>,
    pub time_to_band_s: Option<f64>,
    /// Mean loss at `n_es` when every run reached the band, otherwise mean
    /// closest-to-reference loss.
    pub mse_at_nes_or_best: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates per-run metrics by method, keeping first-seen method order.
pub fn aggregate(metrics: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut labels: Vec<String> = Vec::new();
    for m in metrics {
        let l = m.method.label();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunMetrics> = metrics.iter().filter(|m| m.method.label() == label).collect();
            let hits = group.iter().filter(|m| m.n_es.is_some()).count();
            let all = hits == group.len();
            SummaryRow {
                eta2: group[0].method.eta2(),
                method: label,
                runs: group.len(),
                hits,
                avg_train_time_s: mean(group.iter().map(|m| m.wall_time_s)),
                n_es: if all { group.iter().filter_map(|m| m.n_es).max() } else { None },
                time_to_band_s: all.then(|| mean(group.iter().filter_map(|m| m.time_to_band_s))),
                mse_at_nes_or_best: if all {
                    mean(group.iter().filter_map(|m| m.mse_at_nes))
                } else {
                    mean(group.iter().map(|m| m.best_mse))
                },
            }
        })
        .collect()
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Aligned text rendering of the summary.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>8} {:>6} {:>16} {:>8} {:>14} {:>20}",
        "method", "eta2", "hits", "avg_train_time_s", "n_es", "time_to_band_s", "mse_at_nes_or_best"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>6} {:>16.3} {:>8} {:>14} {:>20.6}",
            r.method,
            opt_str(r.eta2),
            format!("{}/{}", r.hits, r.runs),
            r.avg_train_time_s,
            opt_str(r.n_es),
            r.time_to_band_s.map_or_else(|| "NA".to_string(), |t| format!("{t:.3}")),
            r.mse_at_nes_or_best
        );
    }
    out
}

pub const TRACE_HEADER: [&str; 4] = ["iter", "v_delta", "test_mse", "elapsed_s"];

pub const SUMMARY_HEADER: [&str; 6] = [
    "method",
    "eta2",
    "avg_train_time_s",
    "n_es",
    "time_to_band_s",
    "mse_at_nes_or_best",
];

pub fn trace_file_name(method: &Method, seed: u64) -> String {
    format!("trace_{}_{seed}.csv", method.label())
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.v_delta.map_or_else(String::new, |v| v.to_string()),
            r.test_mse.to_string(),
            r.elapsed_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.eta2.map_or_else(String::new, |e| e.to_string()),
            r.avg_train_time_s.to_string(),
            opt_str(r.n_es),
            opt_str(r.time_to_band_s),
            r.mse_at_nes_or_best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
