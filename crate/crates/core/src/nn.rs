//! Minimal dense feed-forward network with softplus hidden layers, manual
//! reverse-mode gradients, and Adam.
//!
//! Parameters are one flat `Vec<f64>`; layer `l` stores its weight matrix
//! (`outputs x inputs`, row-major) followed by its bias.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const CHECKPOINT_FORMAT: &str = "perceptscore-mlp/1";

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

fn layout(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut total = 0;
    for w in sizes.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let (offsets, total) = layout(sizes);
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; total],
            offsets,
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` init for weights and biases.
    pub fn new(sizes: &[usize], stream: &mut RngStream) -> Self {
        let mut mlp = Mlp::zeros(sizes);
        for l in 0..mlp.num_layers() {
            let bound = 1.0 / (mlp.sizes[l] as f64).sqrt();
            let range = mlp.layer_range(l);
            for p in &mut mlp.params[range] {
                *p = stream.uniform(-bound, bound);
            }
        }
        mlp
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let len = self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        self.offsets[l]..self.offsets[l] + len
    }

    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
        let start = self.offsets[l];
        let w = ArrayView2::from_shape((rows, cols), &self.params[start..start + rows * cols])
            .expect("layer shape");
        let b = ArrayView1::from(&self.params[start + rows * cols..start + rows * cols + rows]);
        (w, b)
    }

    /// Human-readable name of the parameter block containing flat index `idx`.
    pub fn block_name(&self, idx: usize) -> String {
        for l in 0..self.num_layers() {
            let r = self.layer_range(l);
            if r.contains(&idx) {
                let weights = self.sizes[l] * self.sizes[l + 1];
                let part = if idx - r.start < weights { "weights" } else { "bias" };
                return format!("layer {l} {part}");
            }
        }
        format!("index {idx} out of range")
    }

    /// Zeroes the last layer so the raw output is 0 for every input.
    pub fn zero_output_layer(&mut self) {
        let r = self.layer_range(self.num_layers() - 1);
        self.params[r].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut z = a.dot(&w.t());
            z += &b;
            if l + 1 < self.num_layers() {
                z.mapv_inplace(softplus);
            }
            a = z;
        }
        a
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers() - 1);
        let mut a = x.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut z = a.dot(&w.t());
            z += &b;
            inputs.push(a);
            if l + 1 < self.num_layers() {
                a = z.mapv(softplus);
                pre.push(z);
            } else {
                a = z;
            }
        }
        Trace {
            inputs,
            pre,
            output: a,
        }
    }

    /// Vector-Jacobian product: given `d_out = dL/d(output)`, returns
    /// `dL/d(params)` (flat, same layout) and `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, d_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut dz = d_out.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (w, _) = self.layer(l);
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let dw = dz.t().dot(&trace.inputs[l]);
            let db = dz.sum_axis(Axis(0));
            let start = self.offsets[l];
            grad[start..start + rows * cols]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            grad[start + rows * cols..start + rows * cols + rows]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            let mut da = dz.dot(&w);
            if l > 0 {
                da.zip_mut_with(&trace.pre[l - 1], |g, z| *g *= sigmoid(*z));
            }
            dz = da;
        }
        (grad, dz)
    }

    pub fn to_layers(&self) -> Vec<LayerRecord> {
        (0..self.num_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                LayerRecord {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.iter().copied().collect(),
                    bias: b.to_vec(),
                }
            })
            .collect()
    }

    pub fn from_layers(layers: &[LayerRecord]) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Input("checkpoint has no layers".into()));
        };
        let mut sizes = vec![first.cols];
        for (l, rec) in layers.iter().enumerate() {
            if rec.cols != *sizes.last().unwrap()
                || rec.weights.len() != rec.rows * rec.cols
                || rec.bias.len() != rec.rows
            {
                return Err(Error::Input(format!("checkpoint layer {l} has inconsistent shape")));
            }
            sizes.push(rec.rows);
        }
        let mut mlp = Mlp::zeros(&sizes);
        let mut k = 0;
        for rec in layers {
            for v in rec.weights.iter().chain(&rec.bias) {
                if !v.is_finite() {
                    return Err(Error::Input("checkpoint contains non-finite parameters".into()));
                }
                mlp.params[k] = *v;
                k += 1;
            }
        }
        Ok(mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk network checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// `score_network` or `generator`.
    pub kind: String,
    pub sizes: Vec<usize>,
    pub hidden_activation: String,
    /// Output head description, e.g. `sigmoid(1)+linear(2)`.
    pub output: String,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, output: String, mlp: &Mlp) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            sizes: mlp.sizes().to_vec(),
            hidden_activation: "softplus".into(),
            output,
            layers: mlp.to_layers(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: &str) -> Result<(Self, Mlp)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        if ck.kind != kind {
            return Err(Error::Input(format!("checkpoint holds a {}, expected {kind}", ck.kind)));
        }
        let mlp = Mlp::from_layers(&ck.layers)?;
        if mlp.sizes() != ck.sizes.as_slice() {
            return Err(Error::Input("checkpoint sizes disagree with its layers".into()));
        }
        Ok((ck, mlp))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Converts a batch of rows into an `(n, d)` matrix.
pub fn rows_to_matrix<R: AsRef<[f64]>>(rows: &[R], d: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), d), flat).expect("rows share dimension")
}

pub fn column(m: &Array2<f64>, j: usize) -> Array1<f64> {
    m.column(j).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sum_output_loss(mlp: &Mlp, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        (mlp.forward(x.view()) * weights).sum()
    }

    #[test]
    fn param_layout() {
        let mlp = Mlp::zeros(&[2, 128, 128, 128, 3]);
        assert_eq!(mlp.num_params(), 2 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 3 + 3);
        assert_eq!(mlp.block_name(0), "layer 0 weights");
        assert_eq!(mlp.block_name(256), "layer 0 bias");
        assert_eq!(mlp.block_name(mlp.num_params() - 1), "layer 3 bias");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut s = RngStream::new(4, "nn-test");
        let mut mlp = Mlp::new(&[3, 16, 16, 2], &mut s);
        let x = array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4]];
        let wts = array![[0.7, -1.3], [0.2, 0.9]];
        let trace = mlp.forward_trace(x.view());
        let (grad, dx) = mlp.backward(&trace, wts.view());
        let h = 1e-6;
        for k in (0..mlp.num_params()).step_by(7) {
            let orig = mlp.params()[k];
            mlp.params_mut()[k] = orig + h;
            let up = sum_output_loss(&mlp, &x, &wts);
            mlp.params_mut()[k] = orig - h;
            let down = sum_output_loss(&mlp, &x, &wts);
            mlp.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (sum_output_loss(&mlp, &xp, &wts) - sum_output_loss(&mlp, &xm, &wts)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn stable_activations() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 0.01);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn layers_round_trip() {
        let mut s = RngStream::new(1, "nn");
        let mlp = Mlp::new(&[2, 5, 3], &mut s);
        assert_eq!(Mlp::from_layers(&mlp.to_layers()).unwrap(), mlp);
    }
}
