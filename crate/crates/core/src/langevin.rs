//! Unadjusted Langevin dynamics driven by a score field,
//! `x <- x + (eps^2 / 2) * score(x) + eps * r`, `r ~ N(0, I)`.
//!
//! Every chain draws its noise from its own substream (ChaCha stream index =
//! chain index), so results do not depend on how chains are scheduled.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::{InitMode, RunConfig};
use crate::rng::{self, RngStream};
use crate::score_net::ScoreNetwork;
use crate::types::RealDataset;

pub const DIVERGENCE_VARIANCE: f64 = 1e6;
pub const CONVERGENCE_WINDOW: usize = 1000;
pub const CONVERGENCE_TOLERANCE: f64 = 0.01;

pub trait ScoreField {
    fn dim(&self) -> usize;
    /// Scores for a batch of positions (one row per chain).
    fn score(&self, x: ArrayView2<f64>) -> Array2<f64>;
}

/// `grad_head / max(value_head, floor)` of a trained network.
pub struct LogScoreField<'a> {
    pub net: &'a ScoreNetwork,
    pub value_floor: f64,
}

impl ScoreField for LogScoreField<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn score(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.net.log_score_batch(x, self.value_floor)
    }
}

/// Closure-backed field, handy for analytic scores.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(ArrayView2<f64>) -> Array2<f64>> ScoreField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (self.f)(x)
    }
}

/// Score of `N(0, I)`: `-x`.
pub fn standard_normal_field(dim: usize) -> FnField<impl Fn(ArrayView2<f64>) -> Array2<f64>> {
    FnField {
        dim,
        f: |x: ArrayView2<f64>| x.mapv(|v| -v),
    }
}

pub fn zero_field(dim: usize) -> FnField<impl Fn(ArrayView2<f64>) -> Array2<f64>> {
    FnField {
        dim,
        f: |x: ArrayView2<f64>| Array2::zeros(x.raw_dim()),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("chain {chain} left the finite range at step {step}")]
    NonFinite { chain: usize, step: usize },
    #[error("sampling diverged at step {step} (variance above {DIVERGENCE_VARIANCE})")]
    Diverged {
        step: usize,
        diagnostics: Box<Diagnostics>,
    },
    #[error("invalid sampler input: {0}")]
    Input(String),
}

/// Per-chain Gaussian noise sources.
pub struct ChainNoise {
    streams: Vec<RngStream>,
}

impl ChainNoise {
    pub fn new(base: &RngStream, n_chains: usize) -> Self {
        ChainNoise {
            streams: (0..n_chains as u64).map(|c| base.indexed(c)).collect(),
        }
    }
}

/// One Langevin update of every chain in place.
pub fn langevin_step(
    positions: &mut Array2<f64>,
    field: &dyn ScoreField,
    eps: f64,
    noise: &mut ChainNoise,
    step: usize,
) -> Result<(), SamplerError> {
    if !(eps > 0.0) {
        return Err(SamplerError::Input(format!("eps must be positive, got {eps}")));
    }
    let score = field.score(positions.view());
    let drift = 0.5 * eps * eps;
    for (c, (mut row, srow)) in positions
        .rows_mut()
        .into_iter()
        .zip(score.rows())
        .enumerate()
    {
        let rng = &mut noise.streams[c];
        for (x, s) in row.iter_mut().zip(srow.iter()) {
            *x += drift * s + eps * rng.standard_normal();
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(SamplerError::NonFinite { chain: c, step });
        }
    }
    Ok(())
}

/// Welford accumulator per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(d: usize) -> Self {
        RunningStats {
            count: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for j in 0..self.mean.len() {
            let delta = x[j] - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x[j] - self.mean[j]);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|m| m / denom).collect()
    }
}

/// Unbiased per-dimension variance across rows.
pub fn column_variance(x: &Array2<f64>) -> Vec<f64> {
    let mut stats = RunningStats::new(x.ncols());
    for row in x.rows() {
        stats.push(row.as_slice().expect("row-major positions"));
    }
    stats.variance()
}

#[derive(Debug, Clone)]
pub struct SamplerSettings {
    pub n_chains: usize,
    pub eps: f64,
    pub iters: usize,
    /// Steps between variance snapshots.
    pub thin: usize,
    pub init: InitMode,
    /// When set, every `k`-th late-half position of every chain is kept.
    pub collect_every: Option<usize>,
}

impl SamplerSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SamplerSettings {
            n_chains: cfg.n_chains,
            eps: cfg.eps,
            iters: cfg.langevin_iters,
            thin: cfg.sampler.thin,
            init: cfg.sampler.init,
            collect_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub positions: Array2<f64>,
    pub step: usize,
    /// Pooled statistics over every chain position after the halfway step.
    pub late_half: RunningStats,
    pub thin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSnapshot {
    pub step: usize,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_chains: usize,
    pub eps: f64,
    pub iters: usize,
    pub thin: usize,
    pub initial_variance: Vec<f64>,
    pub final_variance: Vec<f64>,
    pub late_half_mean: Vec<f64>,
    pub late_half_variance: Vec<f64>,
    pub variance_trajectory: Vec<VarianceSnapshot>,
    /// First step after which no 1000-step window changes any per-dimension
    /// variance by 1% or more; `None` if that never happens.
    pub convergence_step: Option<usize>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub state: ChainState,
    pub diagnostics: Diagnostics,
    /// Thinned late-half positions (rows), when requested.
    pub collected: Array2<f64>,
}

pub fn initial_positions(
    n_chains: usize,
    d: usize,
    init: InitMode,
    dataset: Option<&RealDataset>,
    seed: u64,
) -> Result<Array2<f64>, SamplerError> {
    let base = RngStream::new(seed, format!("{}/chains", rng::INIT));
    let mut x = Array2::zeros((n_chains, d));
    match init {
        InitMode::Gaussian => {
            for (c, mut row) in x.rows_mut().into_iter().enumerate() {
                let mut s = base.indexed(c as u64);
                row.iter_mut().for_each(|v| *v = s.standard_normal());
            }
        }
        InitMode::Bootstrap => {
            let ds = dataset
                .ok_or_else(|| SamplerError::Input("bootstrap init needs a dataset".into()))?;
            if ds.dim() != d {
                return Err(SamplerError::Input("dataset dimension mismatch".into()));
            }
            for (c, mut row) in x.rows_mut().into_iter().enumerate() {
                let mut s = base.indexed(c as u64);
                let k = (s.uniform(0.0, 1.0) * ds.len() as f64) as usize;
                let p = &ds.points()[k.min(ds.len() - 1)];
                row.iter_mut().zip(p.coords()).for_each(|(v, c)| *v = *c);
            }
        }
    }
    Ok(x)
}

/// First recorded step `s` such that every later window
/// `[s', s' + CONVERGENCE_WINDOW]` changes each dimension's variance by
/// less than `CONVERGENCE_TOLERANCE` (relative).
pub fn convergence_step(trajectory: &[VarianceSnapshot], thin: usize) -> Option<usize> {
    let lag = CONVERGENCE_WINDOW.div_ceil(thin);
    if trajectory.len() <= lag {
        return None;
    }
    let stable = |i: usize| {
        let (a, b) = (&trajectory[i].variance, &trajectory[i + lag].variance);
        a.iter()
            .zip(b)
            .all(|(x, y)| *x > 0.0 && ((y - x) / x).abs() < CONVERGENCE_TOLERANCE)
    };
    let last = trajectory.len() - lag;
    if !stable(last - 1) {
        return None;
    }
    let mut first = last - 1;
    while first > 0 && stable(first - 1) {
        first -= 1;
    }
    Some(trajectory[first].step)
}

pub fn run_sampling(
    field: &dyn ScoreField,
    settings: &SamplerSettings,
    seed: u64,
    dataset: Option<&RealDataset>,
) -> Result<SampleRun, SamplerError> {
    let d = field.dim();
    if settings.n_chains == 0 || settings.thin == 0 {
        return Err(SamplerError::Input("n_chains and thin must be >= 1".into()));
    }
    let positions = initial_positions(settings.n_chains, d, settings.init, dataset, seed)?;
    let mut noise = ChainNoise::new(&RngStream::new(seed, rng::LANGEVIN), settings.n_chains);
    let initial_variance = column_variance(&positions);
    let mut state = ChainState {
        positions,
        step: 0,
        late_half: RunningStats::new(d),
        thin: settings.thin,
    };
    let mut trajectory = vec![VarianceSnapshot {
        step: 0,
        variance: initial_variance.clone(),
    }];
    let mut collected = Vec::new();
    let half = settings.iters / 2;

    let diagnostics = |state: &ChainState, trajectory: &[VarianceSnapshot], diverged: bool| Diagnostics {
        n_chains: settings.n_chains,
        eps: settings.eps,
        iters: settings.iters,
        thin: settings.thin,
        initial_variance: initial_variance.clone(),
        final_variance: column_variance(&state.positions),
        late_half_mean: state.late_half.mean().to_vec(),
        late_half_variance: state.late_half.variance(),
        variance_trajectory: trajectory.to_vec(),
        convergence_step: convergence_step(trajectory, settings.thin),
        diverged,
    };

    for t in 1..=settings.iters {
        langevin_step(&mut state.positions, field, settings.eps, &mut noise, t)?;
        state.step = t;
        if t > half {
            for row in state.positions.rows() {
                state.late_half.push(row.as_slice().expect("row-major"));
            }
            if let Some(k) = settings.collect_every {
                if (t - half).is_multiple_of(k) {
                    collected.extend(state.positions.iter().copied());
                }
            }
        }
        if t % settings.thin == 0 || t == settings.iters {
            let variance = column_variance(&state.positions);
            let blown = variance.iter().any(|v| *v > DIVERGENCE_VARIANCE);
            trajectory.push(VarianceSnapshot { step: t, variance });
            if blown {
                return Err(SamplerError::Diverged {
                    step: t,
                    diagnostics: Box::new(diagnostics(&state, &trajectory, true)),
                });
            }
        }
    }
    let diagnostics = diagnostics(&state, &trajectory, false);
    let rows = collected.len() / d.max(1);
    let collected = Array2::from_shape_vec((rows, d), collected).expect("collected rows");
    Ok(SampleRun {
        state,
        diagnostics,
        collected,
    })
}
