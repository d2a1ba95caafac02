//! Probability samplers built on [`Rng`]: Gaussian noise, Gamma and
//! Dirichlet variates, and Xavier-uniform weight initialization.

use serde::{Deserialize, Serialize};

use super::{Matrix, Rng};
use crate::error::{Error, Result};

/// Concentration parameters of a Dirichlet distribution on the k-simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletSpec {
    alpha: Vec<f64>,
}

impl DirichletSpec {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("Dirichlet needs at least one concentration"));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::invalid(format!(
                "Dirichlet concentration must be positive and finite, got {a}"
            )));
        }
        Ok(DirichletSpec { alpha })
    }

    /// `k` equal concentrations.
    pub fn symmetric(k: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![alpha; k])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        self.alpha.iter().map(|a| a / total).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let a0: f64 = self.alpha.iter().sum();
        self.alpha
            .iter()
            .map(|a| a * (a0 - a) / (a0 * a0 * (a0 + 1.0)))
            .collect()
    }
}

impl TryFrom<Vec<f64>> for DirichletSpec {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<DirichletSpec> for Vec<f64> {
    fn from(spec: DirichletSpec) -> Vec<f64> {
        spec.alpha
    }
}

/// `rows x cols` matrix of i.i.d. N(0, sigma^2) entries.
pub fn sample_gaussian(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Gamma(shape, 1) variate by Marsaglia and Tsang's squeeze method.
///
/// Shapes below one are boosted: draw Gamma(shape + 1) and scale by `U^(1/shape)`.
pub fn sample_gamma(rng: &mut Rng, shape: f64) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let boosted = sample_gamma(rng, shape + 1.0);
        return boosted * rng.uniform_open0().powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = rng.normal();
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u = rng.uniform_open0();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// One Dirichlet draw written into `out` (length k).
pub fn sample_dirichlet_into(rng: &mut Rng, spec: &DirichletSpec, out: &mut [f64]) {
    debug_assert_eq!(out.len(), spec.k());
    loop {
        let mut total = 0.0;
        for (o, &a) in out.iter_mut().zip(&spec.alpha) {
            *o = sample_gamma(rng, a);
            total += *o;
        }
        // All-zero draws only happen for tiny concentrations via underflow.
        if total > 0.0 && total.is_finite() {
            for o in out.iter_mut() {
                *o /= total;
            }
            return;
        }
    }
}

/// `k x n` matrix whose columns are i.i.d. draws from `spec`.
pub fn sample_dirichlet(rng: &mut Rng, spec: &DirichletSpec, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("sample_dirichlet needs n >= 1"));
    }
    let k = spec.k();
    let mut out = Matrix::zeros(k, n);
    let mut col = vec![0.0; k];
    for j in 0..n {
        sample_dirichlet_into(rng, spec, &mut col);
        out.set_col(j, &col);
    }
    Ok(out)
}

/// Weight matrix for a dense layer `fan_in -> fan_out` (shape `fan_out x fan_in`),
/// uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid("xavier_uniform needs positive fans"));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
        .collect();
    Matrix::from_vec(fan_out, fan_in, data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
