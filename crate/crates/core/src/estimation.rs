//! From black-box pair ratings to score-network training targets.
//!
//! For every real datum `x_n` we draw `M` periphery points
//! `x_hat ~ N(x_n, sigma_per^2 I)`, and for every periphery point `I`
//! antithetic perturbations `dx ~ N(0, sigma_nes^2 I)`. Each perturbation
//! becomes one [`PairQuery`] `(x_hat + dx, x_hat - dx)`. The ratings give
//!
//! * a gradient estimate `(1 / (2 sigma^2 I)) sum_i (D+ - D-) dx_i`,
//! * a value estimate, the KDE mode of the pair means `(D+ + D-) / 2`,
//! * a regularized gradient `grad + sign * b * (x_n - x_hat)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluators::{EvalError, Evaluator, PairQuery, PairResponse};
use crate::kde::kde_mode;
use crate::rng::{self, RngStream};
use crate::types::{DataPoint, RealDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct PeripheryPoint {
    pub point: DataPoint,
    /// 1-based id of the anchoring real datum.
    pub anchor_id: usize,
    pub anchor: DataPoint,
    /// 1-based periphery index within the anchor.
    pub m: usize,
}

impl PeripheryPoint {
    pub fn id(&self) -> (usize, usize) {
        (self.anchor_id, self.m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub periphery_id: (usize, usize),
    pub perturbations: Vec<DataPoint>,
}

/// Training record for one periphery point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTarget {
    pub point: DataPoint,
    /// Estimated `D(x_hat)` in [0, 1].
    pub value: f64,
    /// Regularized estimate of `dD/dx`.
    pub grad: Vec<f64>,
    pub anchor_id: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EstimationError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("evaluation failed after {} answered queries: {source}", answered.len())]
    Evaluator {
        #[source]
        source: EvalError,
        answered: Vec<PairResponse>,
    },

    #[error("no response for query {0}")]
    MissingResponse(String),
}

pub fn query_id(n: usize, m: usize, i: usize) -> String {
    format!("q{n}-{m}-{i}")
}

pub fn sample_periphery(
    dataset: &RealDataset,
    m_per_point: usize,
    sigma_per: f64,
    stream: &mut RngStream,
) -> Result<Vec<PeripheryPoint>> {
    if m_per_point == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(dataset.len() * m_per_point);
    for (n, anchor) in dataset.iter() {
        for m in 1..=m_per_point {
            out.push(PeripheryPoint {
                point: stream.gaussian(anchor, sigma_per)?,
                anchor_id: n,
                anchor: anchor.clone(),
                m,
            });
        }
    }
    Ok(out)
}

pub fn sample_perturbations(
    periphery: &[PeripheryPoint],
    n_perturb: usize,
    sigma_nes: f64,
    stream: &mut RngStream,
) -> Result<Vec<PerturbationSet>> {
    periphery
        .iter()
        .map(|p| {
            let origin = DataPoint::zeros(p.point.dim());
            let perturbations = (0..n_perturb)
                .map(|_| stream.gaussian(&origin, sigma_nes))
                .collect::<Result<Vec<_>>>()?;
            Ok(PerturbationSet {
                periphery_id: p.id(),
                perturbations,
            })
        })
        .collect()
}

/// One antithetic query per perturbation.
pub fn pair_queries(periphery: &PeripheryPoint, set: &PerturbationSet) -> Vec<PairQuery> {
    let (n, m) = periphery.id();
    set.perturbations
        .iter()
        .enumerate()
        .map(|(k, dx)| {
            let (plus, minus): (Vec<f64>, Vec<f64>) = periphery
                .point
                .coords()
                .iter()
                .zip(dx.coords())
                .map(|(x, d)| (x + d, x - d))
                .unzip();
            PairQuery {
                query_id: query_id(n, m, k + 1),
                periphery_id: (n, m),
                perturb_index: k + 1,
                stim_plus: DataPoint::new(plus).expect("finite stimulus"),
                stim_minus: DataPoint::new(minus).expect("finite stimulus"),
            }
        })
        .collect()
}

/// Antithetic NES estimate of `dD/dx`.
///
/// `responses[i]` must belong to `perturbations.perturbations[i]`. The sum is
/// normalized by `sigma^2` so the estimator is unbiased for a linear `D`
/// for any `sigma`; at `sigma = 1` this is the usual `1 / (2 sigma I)` form.
pub fn estimate_gradient(
    responses: &[PairResponse],
    perturbations: &PerturbationSet,
    sigma_nes: f64,
) -> Result<Vec<f64>> {
    let count = perturbations.perturbations.len();
    if responses.len() != count || count == 0 {
        return Err(Error::Input(format!(
            "{} responses for {count} perturbations",
            responses.len()
        )));
    }
    let d = perturbations.perturbations[0].dim();
    let mut grad = vec![0.0; d];
    for (r, dx) in responses.iter().zip(&perturbations.perturbations) {
        let diff = r.rating_plus - r.rating_minus;
        for (g, x) in grad.iter_mut().zip(dx.coords()) {
            *g += diff * x;
        }
    }
    let scale = 1.0 / (2.0 * sigma_nes * sigma_nes * count as f64);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

/// KDE mode of the per-pair mean ratings.
pub fn estimate_value(responses: &[PairResponse]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Input("value estimate needs at least one response".into()));
    }
    let means: Vec<f64> = responses
        .iter()
        .map(|r| 0.5 * (r.rating_plus + r.rating_minus))
        .collect();
    Ok(kde_mode(&means))
}

/// `grad + sign * b * (anchor - point)`; `sign = +1` pulls toward the anchor.
pub fn regularize_gradient(grad: &[f64], periphery: &PeripheryPoint, b: f64, sign: i8) -> Vec<f64> {
    let s = f64::from(sign) * b;
    grad.iter()
        .zip(periphery.anchor.coords().iter().zip(periphery.point.coords()))
        .map(|(g, (a, p))| g + s * (a - p))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EstimatedPoint {
    pub periphery: PeripheryPoint,
    pub raw_grad: Vec<f64>,
    pub target: ScoreTarget,
}

/// Deterministic periphery points, perturbations and queries for a config.
#[derive(Debug, Clone)]
pub struct EstimationPlan {
    pub periphery: Vec<PeripheryPoint>,
    pub perturbations: Vec<PerturbationSet>,
    sigma_nes: f64,
    b: f64,
    sign: i8,
}

impl EstimationPlan {
    pub fn new(dataset: &RealDataset, config: &RunConfig) -> Result<Self> {
        if dataset.dim() != config.d {
            return Err(Error::Input(format!(
                "dataset dimension {} does not match d = {}",
                dataset.dim(),
                config.d
            )));
        }
        let mut periphery_rng = RngStream::new(config.seed, rng::PERIPHERY);
        let mut perturb_rng = RngStream::new(config.seed, rng::PERTURBATION);
        let periphery =
            sample_periphery(dataset, config.n_periphery, config.sigma_per, &mut periphery_rng)?;
        let perturbations =
            sample_perturbations(&periphery, config.n_perturb, config.sigma_nes, &mut perturb_rng)?;
        Ok(EstimationPlan {
            periphery,
            perturbations,
            sigma_nes: config.sigma_nes,
            b: config.b,
            sign: config.regularization_sign,
        })
    }

    pub fn queries(&self) -> Vec<PairQuery> {
        self.periphery
            .iter()
            .zip(&self.perturbations)
            .flat_map(|(p, set)| pair_queries(p, set))
            .collect()
    }

    pub fn estimate(
        &self,
        responses: &HashMap<String, PairResponse>,
    ) -> Result<Vec<EstimatedPoint>, EstimationError> {
        let mut out = Vec::with_capacity(self.periphery.len());
        for (p, set) in self.periphery.iter().zip(&self.perturbations) {
            let (n, m) = p.id();
            let answered = (1..=set.perturbations.len())
                .map(|i| {
                    let id = query_id(n, m, i);
                    match responses.get(&id) {
                        Some(r) if r.ratings_in_range() => Ok(r.clone()),
                        Some(_) => Err(Error::Input(format!("ratings for {id} outside [0, 1]")).into()),
                        None => Err(EstimationError::MissingResponse(id)),
                    }
                })
                .collect::<Result<Vec<_>, EstimationError>>()?;
            let raw_grad = estimate_gradient(&answered, set, self.sigma_nes)?;
            let value = estimate_value(&answered)?;
            let grad = regularize_gradient(&raw_grad, p, self.b, self.sign);
            out.push(EstimatedPoint {
                periphery: p.clone(),
                raw_grad,
                target: ScoreTarget {
                    point: p.point.clone(),
                    value,
                    grad,
                    anchor_id: n,
                },
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TargetsRun {
    pub queries: Vec<PairQuery>,
    pub responses: Vec<PairResponse>,
    pub points: Vec<EstimatedPoint>,
}

impl TargetsRun {
    pub fn targets(&self) -> Vec<ScoreTarget> {
        self.points.iter().map(|p| p.target.clone()).collect()
    }
}

/// Periphery sampling, query generation, one evaluation batch, and
/// per-point estimation.
pub fn build_targets(
    dataset: &RealDataset,
    config: &RunConfig,
    evaluator: &dyn Evaluator,
) -> Result<TargetsRun, EstimationError> {
    let plan = EstimationPlan::new(dataset, config)?;
    let queries = plan.queries();
    let responses = evaluator
        .evaluate_batch(&queries)
        .map_err(|source| EstimationError::Evaluator {
            answered: match &source {
                EvalError::Timeout { answered, .. } => answered.clone(),
                _ => Vec::new(),
            },
            source,
        })?;
    let by_id: HashMap<String, PairResponse> = responses
        .iter()
        .map(|r| (r.query_id.clone(), r.clone()))
        .collect();
    let points = plan.estimate(&by_id)?;
    // persisted in query order regardless of evaluator return order
    let responses = queries.iter().map(|q| by_id[&q.query_id].clone()).collect();
    Ok(TargetsRun {
        queries,
        responses,
        points,
    })
}
