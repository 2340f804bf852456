//! Generator baseline trained by gradient ascent on an acceptability signal.
//!
//! `G: z -> x` is a softplus MLP with a linear output. Each step draws a
//! batch `z ~ N(0, I)`, asks a [`CotangentSource`] for `v = dD/dx` at
//! `x = G(z)`, and applies Adam to `-J_G(z)^T v` (ascent on the mean `D`).
//! Without any stochastic term the generator drifts toward the highest-rated
//! region, which is what the comparison with Langevin sampling shows.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::Result;
use crate::estimation::{estimate_gradient, PerturbationSet};
use crate::evaluators::{EvalError, Evaluator, PairQuery};
use crate::nn::{Adam, Checkpoint, Mlp};
use crate::rng::{self, RngStream};
use crate::score_net::ScoreNetwork;
use crate::types::DataPoint;

pub const CHECKPOINT_KIND: &str = "generator";
/// Iterations between recorded mean value-head readings.
pub const VALUE_TRACE_INTERVAL: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum GanError {
    #[error("non-finite generator update at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Core(#[from] crate::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    mlp: Mlp,
    d: usize,
}

fn standard_normal_matrix(n: usize, d: usize, stream: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || stream.standard_normal())
}

impl Generator {
    pub fn new(d: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![d];
        sizes.extend(hidden);
        sizes.push(d);
        let mut init = RngStream::new(seed, format!("{}/generator", rng::INIT));
        Generator {
            mlp: Mlp::new(&sizes, &mut init),
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn map(&self, z: ArrayView2<f64>) -> Array2<f64> {
        self.mlp.forward(z)
    }

    /// `x_k = G(z_k)`, `z_k ~ N(0, I)`.
    pub fn generate(&self, n: usize, stream: &mut RngStream) -> Array2<f64> {
        let z = standard_normal_matrix(n, self.d, stream);
        self.map(z.view())
    }

    /// Fits `G(z) ~= z` so training starts from a generator covering the
    /// prior. Returns the final batch mean squared error.
    pub fn pretrain_identity(&mut self, iters: usize, lr: f64, batch: usize, stream: &mut RngStream) -> f64 {
        let mut adam = Adam::new(self.mlp.num_params(), lr);
        let mut last = f64::NAN;
        for _ in 0..iters {
            let z = standard_normal_matrix(batch, self.d, stream);
            let trace = self.mlp.forward_trace(z.view());
            let diff = &trace.output - &z;
            last = diff.mapv(|e| e * e).sum() / batch as f64;
            let d_out = diff.mapv(|e| 2.0 * e / batch as f64);
            let (grad, _) = self.mlp.backward(&trace, d_out.view());
            adam.step(self.mlp.params_mut(), &grad);
        }
        last
    }

    /// `J_G(z)^T v` summed over the batch, plus `G(z)`.
    pub fn vjp(&self, z: ArrayView2<f64>, v: ArrayView2<f64>) -> Vec<f64> {
        let trace = self.mlp.forward_trace(z);
        self.mlp.backward(&trace, v).0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, format!("linear({})", self.d), &self.mlp).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, mlp) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let d = mlp.sizes()[0];
        if *mlp.sizes().last().unwrap() != d {
            return Err(crate::Error::Input("generator must map d -> d".into()));
        }
        Ok(Generator { mlp, d })
    }
}

/// Supplies `dD/dx` at generated points.
pub trait CotangentSource {
    fn cotangent(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>, GanError>;
}

/// The gradient head of a trained score network.
pub struct GradientHead<'a>(pub &'a ScoreNetwork);

impl CotangentSource for GradientHead<'_> {
    fn cotangent(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>, GanError> {
        Ok(self.0.forward_batch(x).1)
    }
}

/// Live NES queries against an evaluator, one antithetic set per generated
/// point. Costs `batch * n_perturb` queries per training step.
pub struct NesCotangent<'a> {
    pub evaluator: &'a dyn Evaluator,
    pub sigma_nes: f64,
    pub n_perturb: usize,
    stream: RngStream,
    round: usize,
}

impl<'a> NesCotangent<'a> {
    pub fn new(evaluator: &'a dyn Evaluator, sigma_nes: f64, n_perturb: usize, seed: u64) -> Self {
        NesCotangent {
            evaluator,
            sigma_nes,
            n_perturb,
            stream: RngStream::new(seed, format!("{}/nes", rng::GAN)),
            round: 0,
        }
    }
}

impl CotangentSource for NesCotangent<'_> {
    fn cotangent(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>, GanError> {
        self.round += 1;
        let d = x.ncols();
        let origin = DataPoint::zeros(d);
        let mut sets = Vec::with_capacity(x.nrows());
        let mut queries = Vec::with_capacity(x.nrows() * self.n_perturb);
        for (k, row) in x.rows().into_iter().enumerate() {
            let mut perturbations = Vec::with_capacity(self.n_perturb);
            for i in 0..self.n_perturb {
                let dx = self.stream.gaussian(&origin, self.sigma_nes)?;
                let plus = row.iter().zip(dx.coords()).map(|(a, b)| a + b).collect();
                let minus = row.iter().zip(dx.coords()).map(|(a, b)| a - b).collect();
                queries.push(PairQuery {
                    query_id: format!("gan{}-{}-{}", self.round, k + 1, i + 1),
                    periphery_id: (k + 1, self.round),
                    perturb_index: i + 1,
                    stim_plus: DataPoint::new(plus)?,
                    stim_minus: DataPoint::new(minus)?,
                });
                perturbations.push(dx);
            }
            sets.push(PerturbationSet {
                periphery_id: (k + 1, self.round),
                perturbations,
            });
        }
        let mut responses = self.evaluator.evaluate_batch(&queries)?;
        let order: std::collections::HashMap<&str, usize> = queries
            .iter()
            .enumerate()
            .map(|(idx, q)| (q.query_id.as_str(), idx))
            .collect();
        responses.sort_by_key(|r| order.get(r.query_id.as_str()).copied().unwrap_or(usize::MAX));
        let mut out = Array2::zeros((x.nrows(), d));
        for (k, set) in sets.iter().enumerate() {
            let chunk = &responses[k * self.n_perturb..(k + 1) * self.n_perturb];
            let g = estimate_gradient(chunk, set, self.sigma_nes)?;
            out.row_mut(k).iter_mut().zip(g).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GanSettings {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
}

impl GanSettings {
    pub fn from_config(cfg: &crate::RunConfig) -> Self {
        GanSettings {
            iters: cfg.gan.iters,
            lr: cfg.gan.lr,
            batch: cfg.gan.batch,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanLog {
    /// `(iteration, mean value head over a fixed probe batch)`.
    pub value_trace: Vec<(usize, f64)>,
}

/// Ascent using the score network's gradient head as the cotangent.
pub fn train_generator(
    gen: &mut Generator,
    score_net: &ScoreNetwork,
    settings: GanSettings,
    stream: &mut RngStream,
) -> Result<GanLog, GanError> {
    train_generator_with(gen, &mut GradientHead(score_net), settings, stream, Some(score_net))
}

pub fn train_generator_with(
    gen: &mut Generator,
    source: &mut dyn CotangentSource,
    settings: GanSettings,
    stream: &mut RngStream,
    monitor: Option<&ScoreNetwork>,
) -> Result<GanLog, GanError> {
    let mut adam = Adam::new(gen.mlp.num_params(), settings.lr);
    let probe = standard_normal_matrix(256, gen.d, &mut stream.substream("probe"));
    let mut log = GanLog::default();
    let record = |gen: &Generator, it: usize, log: &mut GanLog| {
        if let Some(net) = monitor {
            let x = gen.map(probe.view());
            let (v, _) = net.forward_batch(x.view());
            log.value_trace.push((it, v.mean().unwrap_or(0.0)));
        }
    };
    record(gen, 0, &mut log);
    for it in 1..=settings.iters {
        let z = standard_normal_matrix(settings.batch, gen.d, stream);
        let trace = gen.mlp.forward_trace(z.view());
        let v = source.cotangent(trace.output.view())?;
        let (ascent, _) = gen.mlp.backward(&trace, v.view());
        let scale = -1.0 / settings.batch as f64;
        let descent: Vec<f64> = ascent.iter().map(|g| g * scale).collect();
        if descent.iter().any(|g| !g.is_finite()) {
            return Err(GanError::NonFinite { step: it });
        }
        adam.step(gen.mlp.params_mut(), &descent);
        if gen.mlp.params().iter().any(|p| !p.is_finite()) {
            return Err(GanError::NonFinite { step: it });
        }
        if it % VALUE_TRACE_INTERVAL == 0 || it == settings.iters {
            record(gen, it, &mut log);
        }
    }
    Ok(log)
}
