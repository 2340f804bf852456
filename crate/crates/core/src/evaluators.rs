//! The perceptual evaluation function `D(x) in [0, 1]` behind one query
//! interface: synthetic oracles, replay of recorded ratings, and (in the
//! rating crate) the live rating service.
//!
//! A query is an antithetic pair `(x + dx, x - dx)`; the evaluator rates each
//! stimulus on an absolute 0..1 scale.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::rng::RngStream;
use crate::types::DataPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairQuery {
    pub query_id: String,
    /// `(n, m)`: real datum id and periphery index, both 1-based.
    pub periphery_id: (usize, usize),
    /// 1-based perturbation index `i`.
    pub perturb_index: usize,
    pub stim_plus: DataPoint,
    pub stim_minus: DataPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResponse {
    pub query_id: String,
    pub rating_plus: f64,
    pub rating_minus: f64,
    pub rater_id: String,
    /// UTC seconds. Synthetic oracles stamp 0 so their output is reproducible.
    pub timestamp: f64,
}

impl PairResponse {
    pub fn ratings_in_range(&self) -> bool {
        (0.0..=1.0).contains(&self.rating_plus) && (0.0..=1.0).contains(&self.rating_minus)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid query batch: {0}")]
    InvalidBatch(String),

    /// Retryable: the answered part is returned so callers can checkpoint it.
    #[error("evaluator timed out with {} unanswered queries", unanswered.len())]
    Timeout {
        unanswered: Vec<String>,
        answered: Vec<PairResponse>,
    },

    #[error("recorded responses missing for {} queries: {}", ids.len(), preview(ids))]
    MissingRecords { ids: Vec<String> },

    #[error("evaluator transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl EvalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EvalError::Timeout { .. } | EvalError::Transport(_))
    }
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", ids.len() - SHOWN));
    }
    s
}

pub trait Evaluator: Send + Sync {
    /// Exactly one response per query. Responses are matched by `query_id`,
    /// never by position.
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError> {
        (**self).evaluate_batch(queries)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError> {
        (**self).evaluate_batch(queries)
    }
}

/// Checks the batch preconditions shared by all evaluators.
pub fn check_batch(queries: &[PairQuery]) -> Result<(), EvalError> {
    if queries.is_empty() {
        return Err(EvalError::InvalidBatch("empty batch".into()));
    }
    let mut seen = HashSet::with_capacity(queries.len());
    for q in queries {
        if !seen.insert(q.query_id.as_str()) {
            return Err(EvalError::InvalidBatch(format!(
                "duplicate query_id {}",
                q.query_id
            )));
        }
    }
    Ok(())
}

/// A noise-free closed-form acceptability function.
pub trait Oracle: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleShape {
    /// 1 inside `inner_radius`, cosine half-ramp down to 0 over
    /// `falloff_width`, 0 beyond.
    Plateau {
        center: Vec<f64>,
        inner_radius: f64,
        falloff_width: f64,
    },
    /// `exp(-|x - c|^2 / (2 sigma^2))`.
    GaussianBump { center: Vec<f64>, sigma: f64 },
    /// Sum of two bumps of unequal height, clamped to 1.
    BimodalBump {
        centers: [Vec<f64>; 2],
        heights: [f64; 2],
        sigma: f64,
    },
    /// Constant rating everywhere.
    Flat { value: f64 },
}

impl OracleShape {
    pub fn plateau(d: usize) -> Self {
        OracleShape::Plateau {
            center: vec![0.0; d],
            inner_radius: 3.0,
            falloff_width: 2.0,
        }
    }

    pub fn gaussian_bump(d: usize) -> Self {
        OracleShape::GaussianBump {
            center: vec![0.0; d],
            sigma: 2.0,
        }
    }

    pub fn bimodal_bump(d: usize) -> Self {
        let mut left = vec![0.0; d];
        let mut right = vec![0.0; d];
        left[0] = -2.5;
        right[0] = 2.5;
        OracleShape::BimodalBump {
            centers: [left, right],
            heights: [1.0, 0.6],
            sigma: 1.0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OracleShape::Plateau { .. } => "plateau",
            OracleShape::GaussianBump { .. } => "gaussian_bump",
            OracleShape::BimodalBump { .. } => "bimodal_bump",
            OracleShape::Flat { .. } => "flat",
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let dim_ok = |c: &Vec<f64>| c.len() == d && c.iter().all(|v| v.is_finite());
        let ok = match self {
            OracleShape::Plateau {
                center,
                inner_radius,
                falloff_width,
            } => dim_ok(center) && *inner_radius > 0.0 && *falloff_width > 0.0,
            OracleShape::GaussianBump { center, sigma } => dim_ok(center) && *sigma > 0.0,
            OracleShape::BimodalBump {
                centers,
                heights,
                sigma,
            } => {
                centers.iter().all(dim_ok)
                    && heights.iter().all(|h| (0.0..=1.0).contains(h))
                    && *sigma > 0.0
            }
            OracleShape::Flat { value } => (0.0..=1.0).contains(value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} oracle for d = {d}", self.kind())))
        }
    }
}

fn bump(x: &[f64], center: &[f64], sigma: f64) -> (f64, Vec<f64>) {
    let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
    let v = (-d2 / (2.0 * sigma * sigma)).exp();
    let grad = x
        .iter()
        .zip(center)
        .map(|(a, c)| -v * (a - c) / (sigma * sigma))
        .collect();
    (v, grad)
}

impl Oracle for OracleShape {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            OracleShape::Plateau {
                center,
                inner_radius,
                falloff_width,
            } => {
                let r = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                if r <= *inner_radius {
                    1.0
                } else if r >= inner_radius + falloff_width {
                    0.0
                } else {
                    0.5 * (1.0 + (PI * (r - inner_radius) / falloff_width).cos())
                }
            }
            OracleShape::GaussianBump { center, sigma } => bump(x, center, *sigma).0,
            OracleShape::BimodalBump {
                centers,
                heights,
                sigma,
            } => {
                let v: f64 = centers
                    .iter()
                    .zip(heights)
                    .map(|(c, h)| h * bump(x, c, *sigma).0)
                    .sum();
                v.min(1.0)
            }
            OracleShape::Flat { value } => *value,
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            OracleShape::Plateau {
                center,
                inner_radius,
                falloff_width,
            } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r <= *inner_radius || r >= inner_radius + falloff_width {
                    return vec![0.0; x.len()];
                }
                let dd_dr = -0.5 * PI / falloff_width * (PI * (r - inner_radius) / falloff_width).sin();
                diff.iter().map(|v| dd_dr * v / r).collect()
            }
            OracleShape::GaussianBump { center, sigma } => bump(x, center, *sigma).1,
            OracleShape::BimodalBump {
                centers,
                heights,
                sigma,
            } => {
                let mut total = 0.0;
                let mut grad = vec![0.0; x.len()];
                for (c, h) in centers.iter().zip(heights) {
                    let (v, g) = bump(x, c, *sigma);
                    total += h * v;
                    for (acc, gi) in grad.iter_mut().zip(g) {
                        *acc += h * gi;
                    }
                }
                if total > 1.0 {
                    vec![0.0; x.len()]
                } else {
                    grad
                }
            }
            OracleShape::Flat { .. } => vec![0.0; x.len()],
        }
    }
}

fn default_quantum() -> f64 {
    0.01
}

/// Oracle shape plus the slider-rater noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    #[serde(flatten)]
    pub shape: OracleShape,
    #[serde(default)]
    pub noise_std: f64,
    /// 0 disables quantization.
    #[serde(default = "default_quantum")]
    pub slider_quantum: f64,
}

impl OracleSpec {
    pub fn noiseless(shape: OracleShape) -> Self {
        OracleSpec {
            shape,
            noise_std: 0.0,
            slider_quantum: default_quantum(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.shape.validate(d)?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.slider_quantum >= 0.0 && self.slider_quantum < 1.0) {
            return Err(Error::Config(format!(
                "slider_quantum must lie in [0, 1), got {}",
                self.slider_quantum
            )));
        }
        Ok(())
    }

    pub fn build(&self, noise: RngStream) -> OracleEvaluator<OracleShape> {
        noise_wrap(self.shape.clone(), self.noise_std, self.slider_quantum, noise)
    }
}

/// Synthetic rater: `clamp(quantize(oracle(x) + g), 0, 1)` with
/// `g ~ N(0, noise_std^2)`.
///
/// Noise for a query is drawn from a substream keyed by its `query_id`, so
/// responses do not depend on batch composition or order.
#[derive(Debug, Clone)]
pub struct OracleEvaluator<O> {
    oracle: O,
    noise_std: f64,
    slider_quantum: f64,
    noise: RngStream,
    rater_id: String,
}

pub fn noise_wrap<O: Oracle>(
    oracle: O,
    noise_std: f64,
    slider_quantum: f64,
    stream: RngStream,
) -> OracleEvaluator<O> {
    assert!(noise_std >= 0.0, "noise_std must be non-negative");
    OracleEvaluator {
        oracle,
        noise_std,
        slider_quantum,
        noise: stream,
        rater_id: "oracle".into(),
    }
}

/// Rounds to the nearest multiple of `quantum`; identity when `quantum == 0`.
pub fn quantize(value: f64, quantum: f64) -> f64 {
    if quantum <= 0.0 {
        return value;
    }
    let steps = 1.0 / quantum;
    if (steps - steps.round()).abs() < 1e-9 {
        // k / steps gives the correctly rounded decimal (0.5 rather than 0.50000000001)
        (value * steps.round()).round() / steps.round()
    } else {
        (value / quantum).round() * quantum
    }
}

impl<O: Oracle> OracleEvaluator<O> {
    pub fn with_rater_id(mut self, rater_id: impl Into<String>) -> Self {
        self.rater_id = rater_id.into();
        self
    }

    pub fn oracle(&self) -> &O {
        &self.oracle
    }

    fn rate(&self, x: &[f64], noise: &mut RngStream) -> f64 {
        let mut v = self.oracle.value(x);
        if self.noise_std > 0.0 {
            v += self.noise_std * noise.standard_normal();
        }
        quantize(v, self.slider_quantum).clamp(0.0, 1.0)
    }

    /// Rates one point with noise keyed by `key`.
    pub fn rate_point(&self, x: &[f64], key: &str) -> f64 {
        let mut noise = self.noise.substream(key);
        self.rate(x, &mut noise)
    }
}

impl<O: Oracle> Evaluator for OracleEvaluator<O> {
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError> {
        check_batch(queries)?;
        Ok(queries
            .iter()
            .map(|q| {
                let mut noise = self.noise.substream(&q.query_id);
                let rating_plus = self.rate(q.stim_plus.coords(), &mut noise);
                let rating_minus = self.rate(q.stim_minus.coords(), &mut noise);
                PairResponse {
                    query_id: q.query_id.clone(),
                    rating_plus,
                    rating_minus,
                    rater_id: self.rater_id.clone(),
                    timestamp: 0.0,
                }
            })
            .collect())
    }
}

/// Serves previously recorded responses verbatim.
#[derive(Debug, Clone)]
pub struct ReplayEvaluator {
    records: HashMap<String, PairResponse>,
}

pub fn replay_evaluator(records: &Path) -> Result<ReplayEvaluator> {
    ReplayEvaluator::from_records(jsonl::read(records)?)
}

impl ReplayEvaluator {
    pub fn from_records(records: Vec<PairResponse>) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        for r in records {
            if !r.ratings_in_range() {
                return Err(Error::Input(format!(
                    "recorded ratings for {} are outside [0, 1]",
                    r.query_id
                )));
            }
            map.entry(r.query_id.clone()).or_insert(r);
        }
        Ok(ReplayEvaluator { records: map })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Evaluator for ReplayEvaluator {
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError> {
        check_batch(queries)?;
        let missing: Vec<String> = queries
            .iter()
            .filter(|q| !self.records.contains_key(&q.query_id))
            .map(|q| q.query_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::MissingRecords { ids: missing });
        }
        Ok(queries
            .iter()
            .map(|q| self.records[&q.query_id].clone())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn query(id: &str, plus: &[f64], minus: &[f64]) -> PairQuery {
        PairQuery {
            query_id: id.into(),
            periphery_id: (1, 1),
            perturb_index: 1,
            stim_plus: DataPoint::new(plus.to_vec()).unwrap(),
            stim_minus: DataPoint::new(minus.to_vec()).unwrap(),
        }
    }

    fn exact(shape: OracleShape) -> OracleEvaluator<OracleShape> {
        noise_wrap(shape, 0.0, 0.0, RngStream::new(0, "noise"))
    }

    #[test]
    fn plateau_values() {
        let ev = exact(OracleShape::plateau(2));
        let out = ev
            .evaluate_batch(&[query("a", &[0.0, 0.0], &[5.0, 0.0])])
            .unwrap();
        assert_eq!(out[0].rating_plus, 1.0);
        assert_abs_diff_eq!(out[0].rating_minus, 0.0, epsilon = 1e-15);
        // halfway down the ramp
        assert_abs_diff_eq!(ev.oracle().value(&[0.0, 4.0]), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_bump_closed_form() {
        let ev = exact(OracleShape::gaussian_bump(2));
        assert_abs_diff_eq!(ev.oracle().value(&[2.0, 0.0]), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(ev.oracle().value(&[2.0, 0.0]), 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let shapes = [
            OracleShape::plateau(2),
            OracleShape::gaussian_bump(2),
            OracleShape::bimodal_bump(2),
        ];
        let h = 1e-6;
        for shape in &shapes {
            for x in [[3.5, 1.0], [-1.0, 2.0], [2.0, -0.3], [0.4, 4.1]] {
                let g = shape.gradient(&x);
                for j in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (shape.value(&xp) - shape.value(&xm)) / (2.0 * h);
                    assert_abs_diff_eq!(g[j], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn quantization_rounds_to_slider_steps() {
        assert_eq!(quantize(0.503, 0.01), 0.5);
        assert_eq!(quantize(0.567, 0.01), 0.57);
        assert_eq!(quantize(0.123456, 0.0), 0.123456);
        let ev = noise_wrap(OracleShape::Flat { value: 0.503 }, 0.0, 0.01, RngStream::new(0, "n"));
        let r = ev.evaluate_batch(&[query("q", &[0.0], &[1.0])]).unwrap();
        assert_eq!(r[0].rating_plus, 0.50);
    }

    #[test]
    fn bare_wrapper_is_identity() {
        let shape = OracleShape::gaussian_bump(2);
        let ev = exact(shape.clone());
        let q = query("q", &[0.3, -0.7], &[1.1, 0.2]);
        let r = ev.evaluate_batch(&[q]).unwrap();
        assert_eq!(r[0].rating_plus, shape.value(&[0.3, -0.7]));
        assert_eq!(r[0].rating_minus, shape.value(&[1.1, 0.2]));
    }

    #[test]
    fn clamped_noise_mean() {
        // E[min(1 + g, 1)] = 1 - 0.1 / sqrt(2 pi) ~= 0.960
        let ev = noise_wrap(OracleShape::Flat { value: 1.0 }, 0.1, 0.01, RngStream::new(5, "n"));
        let queries: Vec<_> = (0..5_000)
            .map(|k| query(&format!("q{k}"), &[0.0], &[0.0]))
            .collect();
        let out = ev.evaluate_batch(&queries).unwrap();
        let ratings: Vec<f64> = out
            .iter()
            .flat_map(|r| [r.rating_plus, r.rating_minus])
            .collect();
        assert_eq!(ratings.len(), 10_000);
        assert!(ratings.iter().all(|r| (0.0..=1.0).contains(r)));
        let mean = ratings.iter().sum::<f64>() / ratings.len() as f64;
        assert!((0.93..=0.99).contains(&mean), "mean {mean}");
    }

    #[test]
    fn noisy_responses_ignore_batch_order() {
        let ev = noise_wrap(OracleShape::plateau(2), 0.2, 0.01, RngStream::new(9, "n"));
        let qs: Vec<_> = (0..20)
            .map(|k| query(&format!("q{k}"), &[k as f64 * 0.3, 0.0], &[0.0, k as f64 * 0.2]))
            .collect();
        let forward = ev.evaluate_batch(&qs).unwrap();
        let mut reversed_q = qs.clone();
        reversed_q.reverse();
        let mut reversed = ev.evaluate_batch(&reversed_q).unwrap();
        reversed.reverse();
        assert_eq!(forward, reversed);
        assert_eq!(forward, ev.evaluate_batch(&qs).unwrap());
    }

    #[test]
    fn batch_preconditions() {
        let ev = exact(OracleShape::plateau(2));
        assert!(matches!(ev.evaluate_batch(&[]), Err(EvalError::InvalidBatch(_))));
        let q = query("dup", &[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(
            ev.evaluate_batch(&[q.clone(), q]),
            Err(EvalError::InvalidBatch(_))
        ));
    }

    #[test]
    fn replay_returns_records_verbatim() {
        let text = r#"{"query_id":"a","rating_plus":0.25,"rating_minus":0.75,"rater_id":"r1","timestamp":1700000000.5}
{"query_id":"b","rating_plus":1.0,"rating_minus":0.0,"rater_id":"r2","timestamp":1700000001.0}
"#;
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        let ev = replay_evaluator(f.path()).unwrap();
        let out = ev
            .evaluate_batch(&[query("b", &[0.0], &[0.0]), query("a", &[0.0], &[0.0])])
            .unwrap();
        assert_eq!(out[0].query_id, "b");
        assert_eq!(out[1].rating_plus, 0.25);
        assert_eq!(out[1].rating_minus, 0.75);
        assert_eq!(out[1].rater_id, "r1");
        assert_eq!(out[1].timestamp, 1700000000.5);
        assert_eq!(jsonl::to_string(out.iter().rev()).unwrap(), text);
    }

    #[test]
    fn replay_reports_missing_ids() {
        let records: Vec<_> = (0..6000)
            .filter(|k| *k != 4321)
            .map(|k| PairResponse {
                query_id: format!("q{k}"),
                rating_plus: 0.5,
                rating_minus: 0.5,
                rater_id: "r".into(),
                timestamp: 0.0,
            })
            .collect();
        let ev = ReplayEvaluator::from_records(records).unwrap();
        let qs: Vec<_> = (0..6000)
            .map(|k| query(&format!("q{k}"), &[0.0], &[0.0]))
            .collect();
        match ev.evaluate_batch(&qs) {
            Err(EvalError::MissingRecords { ids }) => assert_eq!(ids, vec!["q4321".to_string()]),
            other => panic!("expected missing records, got {other:?}"),
        }
    }

    #[test]
    fn oracle_spec_json_shape() {
        let spec = OracleSpec::noiseless(OracleShape::plateau(2));
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"], "plateau");
        assert_eq!(v["inner_radius"], 3.0);
        assert_eq!(v["slider_quantum"], 0.01);
        let back: OracleSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
        spec.validate(2).unwrap();
        assert!(spec.validate(3).is_err());
    }
}
