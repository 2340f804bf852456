//! Two-headed score network.
//!
//! `x -> softplus hidden layers -> [value logit | d gradient outputs]`. The
//! value head (sigmoid) approximates `D(x)`, the linear gradient head
//! approximates `dD/dx`. Both are regressed onto [`ScoreTarget`]s; the
//! log-score `grad / max(value, floor)` is only formed at sampling time.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::index::sample;

use crate::error::Result;
use crate::estimation::ScoreTarget;
use crate::nn::{rows_to_matrix, sigmoid, Adam, Checkpoint, Mlp};
use crate::rng::{self, RngStream};

pub const CHECKPOINT_KIND: &str = "score_network";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Three hidden layers of 128 units.
    pub fn standard(input_dim: usize, seed: u64) -> Self {
        NetworkSpec {
            input_dim,
            hidden: vec![128, 128, 128],
            seed,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.input_dim + 1);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    mlp: Mlp,
    d: usize,
}

/// Flat view of a target batch.
struct TargetMatrix {
    x: Array2<f64>,
    value: Array1<f64>,
    grad: Array2<f64>,
}

impl TargetMatrix {
    fn new(targets: &[ScoreTarget], d: usize) -> Self {
        let pts: Vec<&[f64]> = targets.iter().map(|t| t.point.coords()).collect();
        let grads: Vec<&[f64]> = targets.iter().map(|t| t.grad.as_slice()).collect();
        TargetMatrix {
            x: rows_to_matrix(&pts, d),
            value: targets.iter().map(|t| t.value).collect(),
            grad: rows_to_matrix(&grads, d),
        }
    }

    fn select(&self, rows: &[usize]) -> TargetMatrix {
        TargetMatrix {
            x: self.x.select(ndarray::Axis(0), rows),
            value: self.value.select(ndarray::Axis(0), rows),
            grad: self.grad.select(ndarray::Axis(0), rows),
        }
    }
}

impl ScoreNetwork {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut init = RngStream::new(spec.seed, format!("{}/score-network", rng::INIT));
        ScoreNetwork {
            mlp: Mlp::new(&spec.sizes(), &mut init),
            d: spec.input_dim,
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        let sizes = mlp.sizes();
        let d = sizes[0];
        if *sizes.last().unwrap() != d + 1 {
            return Err(crate::Error::Input(format!(
                "score network needs {} outputs for d = {d}, found {}",
                d + 1,
                sizes.last().unwrap()
            )));
        }
        Ok(ScoreNetwork { mlp, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn zero_output_layer(&mut self) {
        self.mlp.zero_output_layer();
    }

    /// Value head in (0, 1) and gradient head, for a batch of rows.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
        let out = self.mlp.forward(x);
        let value = out.column(0).mapv(sigmoid);
        let grad = out.slice(s![.., 1..]).to_owned();
        (value, grad)
    }

    pub fn forward(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let m = rows_to_matrix(&[x], self.d);
        let (v, g) = self.forward_batch(m.view());
        (v[0], g.row(0).to_vec())
    }

    /// Mean over the batch of `(S_D - value)^2 + |S_gradD - grad|^2`.
    pub fn loss(&self, batch: &[ScoreTarget]) -> f64 {
        assert!(!batch.is_empty(), "loss of an empty batch");
        let t = TargetMatrix::new(batch, self.d);
        self.loss_matrix(&t)
    }

    fn loss_matrix(&self, t: &TargetMatrix) -> f64 {
        let (value, grad) = self.forward_batch(t.x.view());
        let value_term: f64 = (&value - &t.value).mapv(|e| e * e).sum();
        let grad_term: f64 = (&grad - &t.grad).mapv(|e| e * e).sum();
        (value_term + grad_term) / t.x.nrows() as f64
    }

    /// Loss and its gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, batch: &[ScoreTarget]) -> (f64, Vec<f64>) {
        let t = TargetMatrix::new(batch, self.d);
        self.loss_and_gradient_matrix(&t)
    }

    fn loss_and_gradient_matrix(&self, t: &TargetMatrix) -> (f64, Vec<f64>) {
        let n = t.x.nrows() as f64;
        let trace = self.mlp.forward_trace(t.x.view());
        let out = &trace.output;
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (i, row) in out.rows().into_iter().enumerate() {
            let sv = sigmoid(row[0]);
            let e = sv - t.value[i];
            loss += e * e;
            d_out[[i, 0]] = 2.0 * e * sv * (1.0 - sv) / n;
            for j in 0..self.d {
                let e = row[j + 1] - t.grad[[i, j]];
                loss += e * e;
                d_out[[i, j + 1]] = 2.0 * e / n;
            }
        }
        let (grad, _) = self.mlp.backward(&trace, d_out.view());
        (loss / n, grad)
    }

    /// `grad_head / max(value, floor)`, the estimated `d log D / dx`.
    pub fn log_score(&self, x: &[f64], value_floor: f64) -> Vec<f64> {
        let (v, g) = self.forward(x);
        let denom = v.max(value_floor);
        g.iter().map(|gi| gi / denom).collect()
    }

    pub fn log_score_batch(&self, x: ArrayView2<f64>, value_floor: f64) -> Array2<f64> {
        let (value, mut grad) = self.forward_batch(x);
        for (mut row, v) in grad.rows_mut().into_iter().zip(value.iter()) {
            let denom = v.max(value_floor);
            row.mapv_inplace(|g| g / denom);
        }
        grad
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, format!("sigmoid(1)+linear({})", self.d), &self.mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, mlp) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        ScoreNetwork::from_mlp(mlp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMode {
    Full,
    MiniBatch { size: usize, seed: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training targets")]
    Empty,
    #[error("non-finite loss at step {step} (first bad gradient in {block})")]
    NonFinite { step: usize, block: String },
    #[error("target dimension {found} does not match network input {expected}")]
    Dimension { expected: usize, found: usize },
}

/// Parameters, Adam moments and loss history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: ScoreNetwork,
    pub adam: Adam,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(net: ScoreNetwork, lr: f64) -> Self {
        let adam = Adam::new(net.num_params(), lr);
        TrainState {
            net,
            adam,
            loss_history: Vec::new(),
        }
    }

    /// Runs `iters` Adam steps. The loss recorded for step `k` is the loss
    /// before that step's update.
    pub fn train(&mut self, targets: &[ScoreTarget], iters: usize, mode: BatchMode) -> Result<(), TrainError> {
        if targets.is_empty() {
            return Err(TrainError::Empty);
        }
        if let Some(t) = targets.iter().find(|t| t.point.dim() != self.net.d || t.grad.len() != self.net.d) {
            return Err(TrainError::Dimension {
                expected: self.net.d,
                found: t.point.dim().max(t.grad.len()),
            });
        }
        let all = TargetMatrix::new(targets, self.net.d);
        let mut batch_rng = match mode {
            BatchMode::MiniBatch { seed, .. } => Some(RngStream::new(seed, "minibatch")),
            BatchMode::Full => None,
        };
        for step in 0..iters {
            let (loss, grad) = match (mode, batch_rng.as_mut()) {
                (BatchMode::MiniBatch { size, .. }, Some(rng)) if size < targets.len() => {
                    let rows = sample(rng, targets.len(), size).into_vec();
                    self.net.loss_and_gradient_matrix(&all.select(&rows))
                }
                _ => self.net.loss_and_gradient_matrix(&all),
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let idx = grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
                return Err(TrainError::NonFinite {
                    step,
                    block: self.net.mlp.block_name(idx),
                });
            }
            self.loss_history.push(loss);
            self.adam.step(self.net.params_mut(), &grad);
        }
        Ok(())
    }
}
