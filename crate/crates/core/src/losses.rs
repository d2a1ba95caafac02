//! Reconstruction losses (MSE, SAD) with their gradients, and
//! permutation-matched endmember evaluation.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Cosine arguments are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `arccos`.
pub const COS_CLAMP: f64 = 1e-12;
const MAX_MATCH_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Sad,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "sad" => Ok(LossKind::Sad),
            other => Err(Error::invalid(format!("unknown loss {other:?}, expected mse or sad"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient with respect to `Y_hat`.
    pub grad: Matrix,
}

fn same_shape(op: &'static str, y: &Matrix, y_hat: &Matrix) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape {
            op,
            left: y.shape(),
            right: y_hat.shape(),
        });
    }
    Ok(())
}

pub fn loss(kind: LossKind, y: &Matrix, y_hat: &Matrix) -> Result<LossValue> {
    match kind {
        LossKind::Mse => mse_loss(y, y_hat),
        LossKind::Sad => sad_loss(y, y_hat),
    }
}

/// `(1/n) sum_i ||y_hat_i - y_i||^2` over the `n` pixel columns.
pub fn mse_loss(y: &Matrix, y_hat: &Matrix) -> Result<LossValue> {
    same_shape("mse_loss", y, y_hat)?;
    let n = y.cols() as f64;
    let diff = y_hat.sub(y)?;
    Ok(LossValue {
        value: diff.frobenius_norm_sq() / n,
        grad: diff.scale(2.0 / n),
    })
}

/// `(1/n) sum_i arccos(<y_hat_i, y_i> / (|y_hat_i| |y_i|))`.
///
/// A zero-norm `y_hat_i` contributes `pi/2` with zero gradient.
pub fn sad_loss(y: &Matrix, y_hat: &Matrix) -> Result<LossValue> {
    same_shape("sad_loss", y, y_hat)?;
    let (l, n) = y.shape();
    let mut grad = Matrix::zeros(l, n);
    let mut total = 0.0;
    for j in 0..n {
        let (mut dot, mut nn_hat, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..l {
            let (a, b) = (y_hat[(i, j)], y[(i, j)]);
            dot += a * b;
            nn_hat += a * a;
            nn += b * b;
        }
        if nn == 0.0 {
            return Err(Error::invalid(format!("observation column {j} has zero norm")));
        }
        if nn_hat == 0.0 {
            log::warn!("sad_loss: reconstructed pixel {j} is all zeros, counted as pi/2");
            total += FRAC_PI_2;
            continue;
        }
        let (norm_hat, norm) = (nn_hat.sqrt(), nn.sqrt());
        let cos = dot / (norm_hat * norm);
        let clamped = cos.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
        total += clamped.acos();
        if clamped != cos {
            continue;
        }
        // d acos(c)/dc = -1/sqrt(1-c^2); dc/dy_hat = y/(|y_hat||y|) - c y_hat/|y_hat|^2
        let outer = -1.0 / (1.0 - cos * cos).sqrt() / n as f64;
        for i in 0..l {
            let dc = y[(i, j)] / (norm_hat * norm) - cos * y_hat[(i, j)] / nn_hat;
            grad[(i, j)] = outer * dc;
        }
    }
    Ok(LossValue {
        value: total / n as f64,
        grad,
    })
}

/// Spectral angle between two spectra, in radians.
///
/// Uses `2 atan2(|a' - b'|, |a' + b'|)` on the unit vectors, which stays
/// accurate near zero where `acos` of the cosine loses half the digits.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return FRAC_PI_2;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Endmember estimate matched to the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndmemberReport {
    /// `permutation[t]` is the estimated column assigned to true endmember `t`.
    pub permutation: Vec<usize>,
    /// SAD per true endmember, in radians.
    pub per_endmember_sad: Vec<f64>,
    pub mean_sad: f64,
}

fn for_each_permutation(k: usize, mut visit: impl FnMut(&[usize])) {
    // Heap's algorithm.
    let mut p: Vec<usize> = (0..k).collect();
    let mut c = vec![0usize; k];
    visit(&p);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            visit(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Exhaustive search for the column assignment minimizing mean SAD.
/// Ties keep the lexicographically first assignment visited.
pub fn match_endmembers(m_hat: &Matrix, m_true: &Matrix) -> Result<EndmemberReport> {
    if m_hat.shape() != m_true.shape() {
        return Err(Error::Shape {
            op: "match_endmembers",
            left: m_hat.shape(),
            right: m_true.shape(),
        });
    }
    let k = m_true.cols();
    if k > MAX_MATCH_K {
        return Err(Error::invalid(format!(
            "exhaustive matching supports k <= {MAX_MATCH_K}, got {k}; use an assignment solver"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("no endmembers to match"));
    }
    let hat_cols: Vec<Vec<f64>> = (0..k).map(|j| m_hat.col(j)).collect();
    let true_cols: Vec<Vec<f64>> = (0..k).map(|j| m_true.col(j)).collect();
    // sad[t][e]: true t vs estimate e
    let sad: Vec<Vec<f64>> = true_cols
        .iter()
        .map(|t| hat_cols.iter().map(|e| spectral_angle(e, t)).collect())
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_permutation(k, |perm| {
        let total: f64 = perm.iter().enumerate().map(|(t, &e)| sad[t][e]).sum();
        if best.as_ref().is_none_or(|(b, bp)| total < *b || (total == *b && perm < bp.as_slice())) {
            best = Some((total, perm.to_vec()));
        }
    });
    let (total, permutation) = best.expect("k >= 1 has a permutation");
    let per_endmember_sad: Vec<f64> = permutation.iter().enumerate().map(|(t, &e)| sad[t][e]).collect();
    Ok(EndmemberReport {
        permutation,
        per_endmember_sad,
        mean_sad: total / k as f64,
    })
}
