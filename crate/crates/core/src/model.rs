//! The unmixing autoencoder.
//!
//! Encoder, applied to each pixel column:
//!
//! ```text
//! dense(l -> h1) -> leaky relu -> dense(h1 -> h2) -> leaky relu -> dense(h2 -> k)
//!   -> batch norm -> sparse relu  s = max(0, z - theta)
//!   -> sum to one                 a = s / sum(s), uniform if sum(s) < 1e-12
//! ```
//!
//! Decoder: `Y_hat = W_D A` with `W_D >= 0`, so the decoder columns are the
//! endmember estimate. Forward and backward passes are written out by hand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{mat_mul, xavier_uniform, Matrix, Rng};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistics at each training batch.
pub const BN_MOMENTUM: f64 = 0.9;
/// Column sums below this are treated as all-zero columns.
pub const SUM_GUARD: f64 = 1e-12;
pub const RUNNING_VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Sparse-ReLU thresholds, kept nonnegative.
    pub theta: Vec<f64>,
    /// Decoder weights `l x k`, kept nonnegative.
    pub w_d: Matrix,
}

/// Gradients for every trainable group of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub w_d: Matrix,
}

pub const PARAM_GROUPS: [&str; 10] = ["W1", "b1", "W2", "b2", "W3", "b3", "bn_gamma", "bn_beta", "theta", "W_D"];

impl Gradients {
    pub fn groups(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("W1", self.w1.data()),
            ("b1", &self.b1),
            ("W2", self.w2.data()),
            ("b2", &self.b2),
            ("W3", self.w3.data()),
            ("b3", &self.b3),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
            ("theta", &self.theta),
            ("W_D", self.w_d.data()),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|&v| v == 0.0))
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub input: Matrix,
    pub h1: Matrix,
    pub a1: Matrix,
    pub h2: Matrix,
    pub a2: Matrix,
    pub z3: Matrix,
    pub x_hat: Matrix,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance.
    pub batch_var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub bn_out: Matrix,
    /// Sparse-ReLU output, before normalization.
    pub sparse: Matrix,
    /// Per-column normalizer `sum(s)`, zero for fallback columns.
    pub denom: Vec<f64>,
    /// Columns whose sparse output was all zero and were set to uniform.
    pub fallback: Vec<bool>,
    pub abundances: Matrix,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.input.cols()
    }
}

fn dense(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    let mut out = mat_mul(w, x)?;
    for (i, bi) in b.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
    Ok(out)
}

fn leaky(h: &Matrix) -> Matrix {
    h.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

fn leaky_backward(grad: &Matrix, pre: &Matrix) -> Matrix {
    let mut g = grad.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    }
    g
}

/// `(grad_w, grad_b, grad_input)` of a dense layer.
fn dense_backward(w: &Matrix, x: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let gw = mat_mul(grad_out, &x.transpose())?;
    let gb = grad_out.row_sums();
    let gx = mat_mul(&w.transpose(), grad_out)?;
    Ok((gw, gb, gx))
}

impl ModelParams {
    pub fn l(&self) -> usize {
        self.w_d.rows()
    }

    pub fn k(&self) -> usize {
        self.w_d.cols()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.w1.rows(), self.w2.rows()]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        [
            ("W1", self.w1.data_mut()),
            ("b1", &mut self.b1),
            ("W2", self.w2.data_mut()),
            ("b2", &mut self.b2),
            ("W3", self.w3.data_mut()),
            ("b3", &mut self.b3),
            ("bn_gamma", &mut self.bn_gamma),
            ("bn_beta", &mut self.bn_beta),
            ("theta", &mut self.theta),
            ("W_D", self.w_d.data_mut()),
        ]
    }

    /// Encoder pass on an `l x batch` block. Train mode normalizes with the
    /// batch statistics; the running statistics are left untouched here
    /// and folded in by [`ModelParams::update_running_stats`].
    pub fn encoder_forward(&self, y: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        let (l, batch) = y.shape();
        if l != self.l() {
            return Err(Error::Shape {
                op: "encoder_forward",
                left: self.w1.shape(),
                right: y.shape(),
            });
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::invalid("train-mode batch norm needs a batch of at least 2"));
        }
        let k = self.k();
        let h1 = dense(&self.w1, &self.b1, y)?;
        let a1 = leaky(&h1);
        let h2 = dense(&self.w2, &self.b2, &a1)?;
        let a2 = leaky(&h2);
        let z3 = dense(&self.w3, &self.b3, &a2)?;

        let (batch_mean, batch_var) = match mode {
            Mode::Train => {
                let mean: Vec<f64> = (0..k).map(|i| z3.row(i).iter().sum::<f64>() / batch as f64).collect();
                let var: Vec<f64> = (0..k)
                    .map(|i| z3.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / batch as f64)
                    .collect();
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = batch_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Matrix::zeros(k, batch);
        let mut bn_out = Matrix::zeros(k, batch);
        let mut sparse = Matrix::zeros(k, batch);
        for i in 0..k {
            for j in 0..batch {
                let xh = (z3[(i, j)] - batch_mean[i]) * inv_std[i];
                x_hat[(i, j)] = xh;
                let b = self.bn_gamma[i] * xh + self.bn_beta[i];
                bn_out[(i, j)] = b;
                sparse[(i, j)] = (b - self.theta[i]).max(0.0);
            }
        }

        let sums = sparse.col_sums();
        let mut abundances = Matrix::zeros(k, batch);
        let mut denom = vec![0.0; batch];
        let mut fallback = vec![false; batch];
        for j in 0..batch {
            if sums[j] >= SUM_GUARD {
                denom[j] = sums[j];
                for i in 0..k {
                    abundances[(i, j)] = sparse[(i, j)] / denom[j];
                }
            } else {
                fallback[j] = true;
                for i in 0..k {
                    abundances[(i, j)] = 1.0 / k as f64;
                }
            }
        }
        let n_fallback = fallback.iter().filter(|f| **f).count();
        if n_fallback > 0 {
            log::warn!("encoder: {n_fallback} column(s) thresholded to all zeros, set to uniform abundances");
        }
        if !abundances.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let cache = ForwardCache {
            mode,
            input: y.clone(),
            h1,
            a1,
            h2,
            a2,
            z3,
            x_hat,
            batch_mean,
            batch_var,
            inv_std,
            bn_out,
            sparse,
            denom,
            fallback,
            abundances: abundances.clone(),
        };
        Ok((abundances, cache))
    }

    /// `Y_hat = W_D A`.
    pub fn decoder_forward(&self, a: &Matrix) -> Result<Matrix> {
        if a.rows() != self.k() {
            return Err(Error::Shape {
                op: "decoder_forward",
                left: self.w_d.shape(),
                right: a.shape(),
            });
        }
        mat_mul(&self.w_d, a)
    }

    /// Folds a train-mode batch's statistics into the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let nb = cache.batch() as f64;
        for i in 0..self.k() {
            let unbiased = cache.batch_var[i] * nb / (nb - 1.0);
            self.running_mean[i] = BN_MOMENTUM * self.running_mean[i] + (1.0 - BN_MOMENTUM) * cache.batch_mean[i];
            self.running_var[i] =
                (BN_MOMENTUM * self.running_var[i] + (1.0 - BN_MOMENTUM) * unbiased).max(RUNNING_VAR_FLOOR);
        }
    }

    /// Backpropagates `grad_y_hat` (`l x batch`, gradient of the loss at the
    /// decoder output) plus `grad_a_ext` (`k x batch`, extra gradient landing
    /// on the abundances) through decoder and encoder.
    pub fn backward(&self, cache: &ForwardCache, grad_y_hat: &Matrix, grad_a_ext: Option<&Matrix>) -> Result<Gradients> {
        let (k, batch) = (self.k(), cache.batch());
        if grad_y_hat.shape() != (self.l(), batch) {
            return Err(Error::Shape {
                op: "model_backward (grad_y_hat)",
                left: grad_y_hat.shape(),
                right: (self.l(), batch),
            });
        }
        let a = &cache.abundances;
        let w_d = mat_mul(grad_y_hat, &a.transpose())?;
        let mut g_a = mat_mul(&self.w_d.transpose(), grad_y_hat)?;
        if let Some(ext) = grad_a_ext {
            g_a = g_a.add(ext).map_err(|_| Error::Shape {
                op: "model_backward (grad_a_ext)",
                left: ext.shape(),
                right: (k, batch),
            })?;
        }

        // Sum-to-one: ds_j = (da_j - <da, a>) / D.
        let mut g_s = Matrix::zeros(k, batch);
        for j in 0..batch {
            if cache.fallback[j] {
                continue;
            }
            let dot: f64 = (0..k).map(|i| g_a[(i, j)] * a[(i, j)]).sum();
            for i in 0..k {
                g_s[(i, j)] = (g_a[(i, j)] - dot) / cache.denom[j];
            }
        }

        // Sparse ReLU.
        let mut g_bn = Matrix::zeros(k, batch);
        let mut theta = vec![0.0; k];
        for i in 0..k {
            for j in 0..batch {
                if cache.bn_out[(i, j)] - self.theta[i] > 0.0 {
                    g_bn[(i, j)] = g_s[(i, j)];
                    theta[i] -= g_s[(i, j)];
                }
            }
        }

        // Batch norm.
        let mut bn_gamma = vec![0.0; k];
        let mut bn_beta = vec![0.0; k];
        let mut g_z3 = Matrix::zeros(k, batch);
        let nb = batch as f64;
        for i in 0..k {
            let g_row = g_bn.row(i);
            let xh_row = cache.x_hat.row(i);
            bn_gamma[i] = g_row.iter().zip(xh_row).map(|(g, x)| g * x).sum();
            bn_beta[i] = g_row.iter().sum();
            let gamma = self.bn_gamma[i];
            match cache.mode {
                Mode::Train => {
                    // dx = inv_std / N * (N dxh - sum(dxh) - xh * sum(dxh * xh)), dxh = g * gamma
                    let sum_dxh = gamma * bn_beta[i];
                    let sum_dxh_xh = gamma * bn_gamma[i];
                    for j in 0..batch {
                        g_z3[(i, j)] = cache.inv_std[i] / nb
                            * (nb * gamma * g_row[j] - sum_dxh - xh_row[j] * sum_dxh_xh);
                    }
                }
                Mode::Eval => {
                    for j in 0..batch {
                        g_z3[(i, j)] = g_row[j] * gamma * cache.inv_std[i];
                    }
                }
            }
        }

        let (w3, b3, g_a2) = dense_backward(&self.w3, &cache.a2, &g_z3)?;
        let g_h2 = leaky_backward(&g_a2, &cache.h2);
        let (w2, b2, g_a1) = dense_backward(&self.w2, &cache.a1, &g_h2)?;
        let g_h1 = leaky_backward(&g_a1, &cache.h1);
        let (w1, b1, _) = dense_backward(&self.w1, &cache.input, &g_h1)?;

        Ok(Gradients {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            bn_gamma,
            bn_beta,
            theta,
            w_d,
        })
    }

    /// Writes one `.hsib` per parameter group plus `model.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ModelManifest::for_params(self);
        for (name, m) in self.named_tensors() {
            io::write_hsib(&dir.join(format!("{name}.hsib")), &m)?;
        }
        io::write_json(&dir.join("model.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = io::read_json(&dir.join("model.json"))?;
        let read = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let file = manifest
                .files
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, f)| f.clone())
                .unwrap_or_else(|| format!("{name}.hsib"));
            let path = dir.join(file);
            let m = io::read_hsib(&path)?;
            if m.shape() != (rows, cols) {
                return Err(Error::Format {
                    path,
                    msg: format!("expected {rows}x{cols}, found {:?}", m.shape()),
                });
            }
            Ok(m)
        };
        let (l, k, [h1, h2]) = (manifest.l, manifest.k, manifest.hidden);
        let vec = |name: &str, len: usize| read(name, len, 1).map(Matrix::into_vec);
        let p = ModelParams {
            w1: read("W1", h1, l)?,
            b1: vec("b1", h1)?,
            w2: read("W2", h2, h1)?,
            b2: vec("b2", h2)?,
            w3: read("W3", k, h2)?,
            b3: vec("b3", k)?,
            bn_gamma: vec("bn_gamma", k)?,
            bn_beta: vec("bn_beta", k)?,
            running_mean: vec("bn_running_mean", k)?,
            running_var: vec("bn_running_var", k)?,
            theta: vec("theta", k)?,
            w_d: read("W_D", l, k)?,
        };
        Ok(p)
    }

    fn named_tensors(&self) -> Vec<(&'static str, Matrix)> {
        let col = |v: &[f64]| Matrix::from_vec(v.len(), 1, v.to_vec()).expect("column shape");
        vec![
            ("W1", self.w1.clone()),
            ("b1", col(&self.b1)),
            ("W2", self.w2.clone()),
            ("b2", col(&self.b2)),
            ("W3", self.w3.clone()),
            ("b3", col(&self.b3)),
            ("bn_gamma", col(&self.bn_gamma)),
            ("bn_beta", col(&self.bn_beta)),
            ("bn_running_mean", col(&self.running_mean)),
            ("bn_running_var", col(&self.running_var)),
            ("theta", col(&self.theta)),
            ("W_D", self.w_d.clone()),
        ]
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub l: usize,
    pub k: usize,
    pub hidden: [usize; 2],
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Tensor name and file, in write order.
    pub files: Vec<(String, String)>,
}

impl ModelManifest {
    fn for_params(p: &ModelParams) -> Self {
        ModelManifest {
            l: p.l(),
            k: p.k(),
            hidden: p.hidden(),
            leaky_slope: LEAKY_SLOPE,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            files: p
                .named_tensors()
                .into_iter()
                .map(|(n, _)| (n.to_string(), format!("{n}.hsib")))
                .collect(),
        }
    }
}

/// Fresh parameters: Xavier-uniform dense weights, zero biases, identity
/// batch norm, zero thresholds, and `decoder_init` as the decoder.
pub fn init_model(l: usize, k: usize, hidden: [usize; 2], rng: &mut Rng, decoder_init: &Matrix) -> Result<ModelParams> {
    if decoder_init.shape() != (l, k) {
        return Err(Error::Shape {
            op: "init_model",
            left: decoder_init.shape(),
            right: (l, k),
        });
    }
    if !decoder_init.is_finite() || decoder_init.min() < 0.0 {
        return Err(Error::invalid("decoder initialization must be finite and nonnegative"));
    }
    if hidden.contains(&0) || k == 0 || l == 0 {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    let [h1, h2] = hidden;
    Ok(ModelParams {
        w1: xavier_uniform(rng, l, h1)?,
        b1: vec![0.0; h1],
        w2: xavier_uniform(rng, h1, h2)?,
        b2: vec![0.0; h2],
        w3: xavier_uniform(rng, h2, k)?,
        b3: vec![0.0; k],
        bn_gamma: vec![1.0; k],
        bn_beta: vec![0.0; k],
        running_mean: vec![0.0; k],
        running_var: vec![1.0; k],
        theta: vec![0.0; k],
        w_d: decoder_init.clone(),
    })
}

/// Default hidden widths `(9k, 6k)`.
pub fn default_hidden(k: usize) -> [usize; 2] {
    [9 * k, 6 * k]
}
