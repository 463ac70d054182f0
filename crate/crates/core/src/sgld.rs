//! Robust SGLD on `(theta, alpha)` and the vanilla SGLD baseline on `theta`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid;
use crate::model::UtilityModel;
use crate::objective::{DroProblem, ThetaBar, Workspace};

/// Iterates with a coordinate above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default trajectory thinning stride.
pub const DEFAULT_RECORD_EVERY: usize = 10;

/// Random stream used by the samplers. Data draws and Gaussian noise share it.
pub type SgldRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    /// Step size.
    pub lambda: f64,
    /// Inverse temperature.
    pub beta: f64,
    pub n_iter: usize,
    pub seed: u64,
    /// Snap each drawn sample onto the grid before evaluating the drift. Off by default.
    pub snap_samples: bool,
    pub record_every: usize,
}

impl SgldConfig {
    pub fn new(lambda: f64, beta: f64, n_iter: usize, seed: u64) -> Self {
        Self {
            lambda,
            beta,
            n_iter,
            seed,
            snap_samples: false,
            record_every: DEFAULT_RECORD_EVERY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if self.n_iter == 0 {
            return Err(Error::InvalidArgument("n_iter must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// `sqrt(2 lambda / beta)`.
    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.lambda / self.beta).sqrt()
    }

    pub fn rng(&self) -> SgldRng {
        SgldRng::seed_from_u64(self.seed)
    }
}

/// Source of i.i.d. training draws.
pub trait DataSampler {
    fn dim(&self) -> usize;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64];
}

/// Uniform draws with replacement from a finite training set.
#[derive(Debug, Clone)]
pub struct EmpiricalSampler {
    m: usize,
    data: Vec<f64>,
}

impl EmpiricalSampler {
    pub fn new<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut m = None;
        let mut data = Vec::new();
        for row in rows {
            match m {
                None => m = Some(row.len()),
                Some(k) if k != row.len() => {
                    return Err(Error::InvalidArgument("training rows have different lengths".into()))
                }
                _ => {}
            }
            data.extend_from_slice(row);
        }
        match m {
            Some(m) if m > 0 => Ok(Self { m, data }),
            _ => Err(Error::InvalidArgument("empty training set".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.m)
    }
}

impl DataSampler for EmpiricalSampler {
    fn dim(&self) -> usize {
        self.m
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64] {
        let i = rng.random_range(0..self.len());
        &self.data[i * self.m..(i + 1) * self.m]
    }
}

/// Extra values attached to a trajectory record.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecordValues {
    pub v_delta: Option<f64>,
    pub test_loss: Option<f64>,
}

/// Observer called by the samplers. `state` is the flat iterate: `theta`
/// followed by `alpha` for the robust sampler, `theta` alone for vanilla.
pub trait Monitor {
    /// Called after every iteration, including iteration 0.
    fn step(&mut self, _iter: usize, _state: &[f64]) {}

    /// Called at each recorded iteration.
    fn record(&mut self, _iter: usize, _state: &[f64]) -> RecordValues {
        RecordValues::default()
    }
}

/// Monitor that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoMonitor;

impl Monitor for NoMonitor {}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub iter: usize,
    pub state: Vec<f64>,
    pub values: RecordValues,
}

/// Thinned iterate history. Records start at iteration 0, follow every
/// `record_every` iterations and always include the final iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub final_state: Vec<f64>,
}

impl Trajectory {
    /// Final iterate as `(theta, alpha)`; only meaningful for robust runs.
    pub fn final_thetabar(&self) -> Result<ThetaBar> {
        ThetaBar::from_flat(&self.final_state)
    }

    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }
}

/// Fills `out` with `scale * N(0, 1)` draws.
pub fn fill_noise<R: Rng + ?Sized>(rng: &mut R, scale: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

fn check_finite(state: &[f64], iteration: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
        Ok(())
    } else {
        Err(Error::Divergence { iteration })
    }
}

/// One robust update `thetabar - lambda H(thetabar, x) + sqrt(2 lambda / beta) z`
/// with `noise = z` given as standard normals.
pub fn robust_step<M: UtilityModel>(
    problem: &DroProblem<M>,
    thetabar: &ThetaBar,
    x: &[f64],
    config: &SgldConfig,
    noise: &[f64],
) -> Result<ThetaBar> {
    if noise.len() != thetabar.dim() {
        return Err(Error::InvalidArgument(format!(
            "noise has {} entries, state has {}",
            noise.len(),
            thetabar.dim()
        )));
    }
    let h = problem.stochastic_gradient(thetabar, x);
    let scale = config.noise_scale();
    let next: Vec<f64> = thetabar
        .to_flat()
        .iter()
        .zip(&h)
        .zip(noise)
        .map(|((t, g), z)| t - config.lambda * g + scale * z)
        .collect();
    check_finite(&next, 1)?;
    ThetaBar::from_flat(&next)
}

fn should_record(iter: usize, n_iter: usize, every: usize) -> bool {
    iter % every == 0 || iter == n_iter
}

/// Runs `config.n_iter` robust updates from `thetabar_0`.
pub fn run_robust<M, S, O>(
    problem: &DroProblem<M>,
    sampler: &S,
    config: &SgldConfig,
    thetabar_0: &ThetaBar,
    monitor: &mut O,
) -> Result<Trajectory>
where
    M: UtilityModel,
    S: DataSampler,
    O: Monitor,
{
    config.validate()?;
    if thetabar_0.theta.len() != problem.model().param_dim() {
        return Err(Error::InvalidArgument(format!(
            "initial theta has {} entries, model expects {}",
            thetabar_0.theta.len(),
            problem.model().param_dim()
        )));
    }
    if sampler.dim() != problem.grid().m {
        return Err(Error::InvalidArgument("sampler dimension does not match the grid".into()));
    }
    check_finite(&thetabar_0.to_flat(), 0)?;

    let jj = problem.grid().jj;
    let mut rng = config.rng();
    let scale = config.noise_scale();
    let mut ws = Workspace::default();
    let mut tb = thetabar_0.clone();
    let dim = tb.dim();
    let mut h = vec![0.0; dim];
    let mut noise = vec![0.0; dim];
    let mut x = vec![0.0; sampler.dim()];
    let mut flat = tb.to_flat();
    let mut records = Vec::new();

    monitor.step(0, &flat);
    records.push(Record {
        iter: 0,
        values: monitor.record(0, &flat),
        state: flat.clone(),
    });

    for n in 1..=config.n_iter {
        x.copy_from_slice(sampler.draw(&mut rng));
        if config.snap_samples {
            grid::snap_in_place(&mut x, jj)?;
        }
        problem.stochastic_gradient_into(&tb, &x, &mut ws, &mut h);
        fill_noise(&mut rng, scale, &mut noise);
        for ((t, g), z) in flat.iter_mut().zip(&h).zip(&noise) {
            *t = *t - config.lambda * g + z;
        }
        check_finite(&flat, n)?;
        let (alpha, theta) = flat.split_last().expect("dim >= 2");
        tb.theta.copy_from_slice(theta);
        tb.alpha = *alpha;

        monitor.step(n, &flat);
        if should_record(n, config.n_iter, config.record_every) {
            records.push(Record {
                iter: n,
                values: monitor.record(n, &flat),
                state: flat.clone(),
            });
        }
    }
    Ok(Trajectory {
        records,
        final_state: flat,
    })
}

/// Runs `config.n_iter` vanilla updates `theta - lambda grad U(theta, x) + noise`.
pub fn run_vanilla<M, S, O>(
    model: &M,
    sampler: &S,
    config: &SgldConfig,
    theta_0: &[f64],
    monitor: &mut O,
) -> Result<Trajectory>
where
    M: UtilityModel,
    S: DataSampler,
    O: Monitor,
{
    config.validate()?;
    let d = model.param_dim();
    if theta_0.len() != d {
        return Err(Error::InvalidArgument(format!(
            "initial theta has {} entries, model expects {d}",
            theta_0.len()
        )));
    }
    if sampler.dim() != model.data_dim() {
        return Err(Error::InvalidArgument("sampler dimension does not match the model".into()));
    }
    check_finite(theta_0, 0)?;

    let mut rng = config.rng();
    let scale = config.noise_scale();
    let mut theta = theta_0.to_vec();
    let mut g = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut records = Vec::new();

    monitor.step(0, &theta);
    records.push(Record {
        iter: 0,
        values: monitor.record(0, &theta),
        state: theta.clone(),
    });

    for n in 1..=config.n_iter {
        let x = sampler.draw(&mut rng);
        model.gradient(&theta, x, &mut g);
        fill_noise(&mut rng, scale, &mut noise);
        for ((t, gi), z) in theta.iter_mut().zip(&g).zip(&noise) {
            *t = *t - config.lambda * gi + z;
        }
        check_finite(&theta, n)?;
        monitor.step(n, &theta);
        if should_record(n, config.n_iter, config.record_every) {
            records.push(Record {
                iter: n,
                values: monitor.record(n, &theta),
                state: theta.clone(),
            });
        }
    }
    Ok(Trajectory {
        records,
        final_state: theta,
    })
}
