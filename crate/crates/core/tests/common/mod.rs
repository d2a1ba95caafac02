//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use otunmix::losses::{loss, LossKind};
use otunmix::model::{default_hidden, init_model, ModelParams, Mode, PARAM_GROUPS};
use otunmix::numerics::{sample_dirichlet, DirichletSpec, Matrix, Rng};
use otunmix::sinkhorn::{sinkhorn_divergence, DiscreteMeasure, SinkhornConfig};
use otunmix::trainer::ot_regularizer;

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below `NORM_FLOOR * max(1, |J|)` are compared in absolute
/// terms: central differences of a loss of size `|J|` carry rounding noise
/// of order `1e-16 |J| / h`.
pub const NORM_FLOOR: f64 = 1e-5;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_err_scaled(analytic, numeric, 1.0)
}

/// [`rel_err`] for the gradient of a loss whose value is `value`.
pub fn rel_err_scaled(analytic: &[f64], numeric: &[f64], value: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR * value.abs().max(1.0))
}

/// Smallest distance between two distinct columns.
pub fn min_column_gap(a: &Matrix) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..a.cols() {
        for j in i + 1..a.cols() {
            gap = gap.min(norm(&a.col(i).iter().zip(a.col(j)).map(|(x, y)| x - y).collect::<Vec<_>>()));
        }
    }
    gap
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

/// Converged far below the finite-difference resolution.
pub fn tight_sinkhorn(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        tol: 1e-13,
        max_iters: 200_000,
        ..SinkhornConfig::default()
    }
}

/// Random 8-point measures in 3-D: error of the support-point gradient of
/// `S_eps(mu, nu)` against central differences of the divergence value.
pub fn sinkhorn_gradient_error(seed: u64, cfg: &SinkhornConfig) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let x = uniform_matrix(&mut rng, 8, 3, 0.0, 1.0);
    let nu = DiscreteMeasure::uniform(uniform_matrix(&mut rng, 8, 3, 0.0, 1.0)).unwrap();
    let mu = DiscreteMeasure::uniform(x.clone()).unwrap();
    let analytic = otunmix::sinkhorn::sinkhorn_divergence_grad(&mu, &nu, cfg).unwrap();
    let numeric = central_diff(x.data(), |p| {
        let m = DiscreteMeasure::uniform(Matrix::from_vec(8, 3, p.to_vec()).unwrap()).unwrap();
        sinkhorn_divergence(&m, &nu, cfg).unwrap().value
    });
    rel_err(analytic.data(), &numeric)
}

/// Reconstruction-loss gradient with respect to `Y_hat` on random `l x n` data.
pub fn loss_gradient_error(seed: u64, kind: LossKind, l: usize, n: usize) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let y = uniform_matrix(&mut rng, l, n, 0.05, 1.0);
    let y_hat = uniform_matrix(&mut rng, l, n, 0.05, 1.0);
    let analytic = loss(kind, &y, &y_hat).unwrap().grad;
    let numeric = central_diff(y_hat.data(), |p| {
        loss(kind, &y, &Matrix::from_vec(l, n, p.to_vec()).unwrap()).unwrap().value
    });
    rel_err(analytic.data(), &numeric)
}

pub struct ModelCase {
    pub params: ModelParams,
    pub y: Matrix,
    pub target: Matrix,
    pub kind: LossKind,
    pub lambda: f64,
    pub sinkhorn: SinkhornConfig,
}

impl ModelCase {
    /// `l = 8, k = 3, batch = 5`, with non-trivial batch-norm and threshold
    /// parameters so every layer is exercised.
    pub fn new(seed: u64, kind: LossKind, lambda: f64) -> Self {
        let (l, k, batch) = (8, 3, 5);
        let mut rng = Rng::seed_from_u64(seed);
        let dec = uniform_matrix(&mut rng, l, k, 0.0, 1.0);
        let mut params = init_model(l, k, default_hidden(k), &mut rng, &dec).unwrap();
        params.b1 = (0..params.b1.len()).map(|_| rng.uniform() * 0.2 - 0.1).collect();
        params.b2 = (0..params.b2.len()).map(|_| rng.uniform() * 0.2 - 0.1).collect();
        params.b3 = (0..k).map(|_| rng.uniform() * 0.2 - 0.1).collect();
        params.bn_gamma = (0..k).map(|_| 0.5 + rng.uniform()).collect();
        params.bn_beta = (0..k).map(|_| 0.2 + 0.3 * rng.uniform()).collect();
        params.theta = (0..k).map(|_| 0.1 * rng.uniform()).collect();
        // Redraw pixels until no column is thresholded to all zeros (the
        // uniform fallback's boundary is a kink) and no two abundance points
        // coincide (the Euclidean ground cost is not differentiable there).
        let y = loop {
            let y = uniform_matrix(&mut rng, l, batch, 0.05, 1.0);
            let (a, cache) = params.encoder_forward(&y, Mode::Train).unwrap();
            if !cache.fallback.iter().any(|f| *f) && min_column_gap(&a) > 1e-2 {
                break y;
            }
        };
        let target = sample_dirichlet(&mut rng, &DirichletSpec::symmetric(k, 4.0).unwrap(), 8).unwrap();
        ModelCase {
            params,
            y,
            target,
            kind,
            lambda,
            sinkhorn: tight_sinkhorn(1e-2),
        }
    }

    pub fn total_loss(&self, p: &ModelParams) -> f64 {
        let (a, _) = p.encoder_forward(&self.y, Mode::Train).unwrap();
        let y_hat = p.decoder_forward(&a).unwrap();
        let rec = loss(self.kind, &self.y, &y_hat).unwrap().value;
        if self.lambda > 0.0 {
            rec + self.lambda * ot_regularizer(&a, &self.target, &self.sinkhorn).unwrap().0.value
        } else {
            rec
        }
    }

    /// Per parameter group: relative error of the backward pass against
    /// central differences of the total loss.
    pub fn group_errors(&self) -> Vec<(&'static str, f64)> {
        let p = &self.params;
        let (a, cache) = p.encoder_forward(&self.y, Mode::Train).unwrap();
        assert!(cache.fallback.iter().all(|f| !f), "degenerate instance");
        let y_hat = p.decoder_forward(&a).unwrap();
        let rec = loss(self.kind, &self.y, &y_hat).unwrap();
        let ext = (self.lambda > 0.0).then(|| {
            ot_regularizer(&a, &self.target, &self.sinkhorn).unwrap().1.scale(self.lambda)
        });
        let grads = p.backward(&cache, &rec.grad, ext.as_ref()).unwrap();
        let analytic = grads.groups();
        let value = self.total_loss(p);
        (0..PARAM_GROUPS.len())
            .map(|g| {
                let mut probe = p.clone();
                let x = probe.groups_mut()[g].1.to_vec();
                let numeric = central_diff(&x, |v| {
                    probe.groups_mut()[g].1.copy_from_slice(v);
                    self.total_loss(&probe)
                });
                (analytic[g].0, rel_err_scaled(analytic[g].1, &numeric, value))
            })
            .collect()
    }

    /// Gradient of the total loss with respect to the encoder output:
    /// `W_D^T dL/dY_hat + lambda dS/dA` against central differences in `A`.
    pub fn abundance_gradient_error(&self) -> f64 {
        let p = &self.params;
        let (a, _) = p.encoder_forward(&self.y, Mode::Train).unwrap();
        let objective = |a: &Matrix| {
            let y_hat = p.decoder_forward(a).unwrap();
            let rec = loss(self.kind, &self.y, &y_hat).unwrap().value;
            rec + self.lambda * ot_regularizer(a, &self.target, &self.sinkhorn).unwrap().0.value
        };
        let y_hat = p.decoder_forward(&a).unwrap();
        let rec = loss(self.kind, &self.y, &y_hat).unwrap();
        let (_, g_ot) = ot_regularizer(&a, &self.target, &self.sinkhorn).unwrap();
        let analytic = otunmix::numerics::mat_mul(&p.w_d.transpose(), &rec.grad)
            .unwrap()
            .add(&g_ot.scale(self.lambda))
            .unwrap();
        let (k, b) = a.shape();
        let numeric = central_diff(a.data(), |v| objective(&Matrix::from_vec(k, b, v.to_vec()).unwrap()));
        rel_err_scaled(analytic.data(), &numeric, objective(&a))
    }
}
