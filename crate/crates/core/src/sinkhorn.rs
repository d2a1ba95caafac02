//! Entropic optimal transport between discrete measures.
//!
//! The solver runs Sinkhorn iterations on the dual potentials in the log
//! domain:
//!
//! ```text
//! f_i = -eps * LSE_j( log nu_j + (g_j - C_ij) / eps )
//! g_j = -eps * LSE_i( log mu_i + (f_i - C_ij) / eps )
//! ```
//!
//! and reports the entropic cost `W_eps = <C, P> + eps * KL(P | mu x nu)`
//! with `KL(P|Q) = sum P log(P/Q) - sum P + 1`. At the fixed point that
//! equals `<mu, f> + <nu, g>`, which is what gets evaluated; the plan
//! `P_ij = mu_i nu_j exp((f_i + g_j - C_ij) / eps)` is only materialized on request.
//!
//! The Sinkhorn divergence `S = 2 W(mu, nu) - W(mu, mu) - W(nu, nu)` is
//! differentiated with respect to the support points of `mu` through the
//! envelope theorem: the potentials are optimal, so only the explicit
//! dependence of the cost matrix contributes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Weighted point cloud: row `i` of `points` carries mass `weights[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Matrix,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Matrix, weights: Vec<f64>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::invalid("a discrete measure needs at least one point"));
        }
        if weights.len() != points.rows() {
            return Err(Error::invalid(format!(
                "{} weights for {} points",
                weights.len(),
                points.rows()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("measure weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("measure weights sum to {total}, not 1")));
        }
        if !points.is_finite() {
            return Err(Error::NonFinite("measure support points".into()));
        }
        Ok(DiscreteMeasure { points, weights })
    }

    /// Empirical measure with mass `1/m` on each row of `points`.
    pub fn uniform(points: Matrix) -> Result<Self> {
        let m = points.rows();
        Self::new(points, vec![1.0 / m as f64; m])
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    /// `||x - y||_2`
    #[default]
    Euclidean,
    /// `||x - y||_2^2`
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 violation of the row marginal drops below this.
    pub tol: f64,
    #[serde(default)]
    pub cost: GroundCost,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 1e-2,
            max_iters: 2000,
            tol: 1e-9,
            cost: GroundCost::Euclidean,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornConfig {
            epsilon,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// Entropic transport cost `W_eps`.
    pub cost: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub plan: Option<Matrix>,
    pub iters: usize,
    pub converged: bool,
    /// L1 row-marginal violation measured at the last check.
    pub marginal_error: f64,
}

/// The three entropic costs behind a Sinkhorn divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub w_xy: f64,
    pub w_xx: f64,
    pub w_yy: f64,
    /// True when all three sub-solves met the tolerance.
    pub converged: bool,
    pub iters: [usize; 3],
}

fn check_dims(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::Shape {
            op: "cost_matrix",
            left: mu.points.shape(),
            right: nu.points.shape(),
        });
    }
    Ok(())
}

#[inline]
fn ground_cost(x: &[f64], y: &[f64], kind: GroundCost) -> f64 {
    // Differences first: no |x|^2 + |y|^2 - 2<x,y> cancellation for near-equal points.
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    match kind {
        GroundCost::Euclidean => sq.sqrt(),
        GroundCost::SquaredEuclidean => sq,
    }
}

/// `m x m'` matrix of ground costs between the support points.
pub fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, kind: GroundCost) -> Result<Matrix> {
    check_dims(mu, nu)?;
    let (m, n) = (mu.len(), nu.len());
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let x = mu.points.row(i);
        for j in 0..n {
            c[(i, j)] = ground_cost(x, nu.points.row(j), kind);
        }
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(c)
}

/// `out_i = -eps * LSE_j(h_j + k_ij)` for a row-major `k`.
fn soft_min_rows(k: &[f64], h: &[f64], eps: f64, out: &mut [f64]) {
    let n = h.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &k[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (kv, hv) in row.iter().zip(h) {
            let v = kv + hv;
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (kv, hv) in row.iter().zip(h) {
            sum += (kv + hv - max).exp();
        }
        *o = -eps * (max + sum.ln());
    }
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&v| v.ln()).collect()
}

/// Scalings leaving `[1/ABSORB, ABSORB]` are folded back into the potentials.
const ABSORB: f64 = 1e50;
/// Kernel sums below this trigger an exact log-domain update instead.
const TINY: f64 = 1e-250;

/// `K_ij = exp((f_i + g_j - C_ij) / eps)`, row-major.
fn stabilized_kernel(c: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let (m, n) = c.shape();
    let mut k = Vec::with_capacity(m * n);
    for i in 0..m {
        k.extend(c.row(i).iter().zip(g).map(|(cij, gj)| ((f[i] + gj - cij) / eps).exp()));
    }
    k
}

/// `out_i = 1 / sum_j K_ij x_j`. Fails when a sum is too small to invert.
fn row_scaling(k: &[f64], x: &[f64], out: &mut [f64]) -> bool {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let s: f64 = k[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
        if !(s.is_finite() && s > TINY) {
            return false;
        }
        *o = 1.0 / s;
    }
    true
}

/// `out_j = 1 / sum_i K_ij x_i`.
fn col_scaling(k: &[f64], x: &[f64], out: &mut [f64]) -> bool {
    let n = out.len();
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, kij) in out.iter_mut().zip(&k[i * n..(i + 1) * n]) {
            *o += kij * xi;
        }
    }
    for o in out.iter_mut() {
        if !(o.is_finite() && *o > TINY) {
            return false;
        }
        *o = 1.0 / *o;
    }
    true
}

fn absorb(potential: &mut [f64], scaling: &mut [f64], eps: f64) {
    for (p, s) in potential.iter_mut().zip(scaling.iter_mut()) {
        *p += eps * s.ln();
        *s = 1.0;
    }
}

fn out_of_range(s: &[f64]) -> bool {
    s.iter().any(|&v| !(v < ABSORB && v > 1.0 / ABSORB))
}

/// Exact update `out_i = -eps LSE_j(log w_j + (pot_j - C_ij) / eps)` on a
/// row-major cost.
fn exact_update(c: &[f64], log_w: &[f64], pot: &[f64], eps: f64, out: &mut [f64]) {
    let n = pot.len();
    let h: Vec<f64> = log_w.iter().zip(pot).map(|(lw, p)| lw + p / eps).collect();
    let k: Vec<f64> = c.iter().map(|v| -v / eps).collect();
    debug_assert_eq!(k.len(), out.len() * n);
    soft_min_rows(&k, &h, eps, out);
}

/// Plain iterations before a stalled solve switches to Newton steps.
const NEWTON_AFTER: usize = 300;
/// Largest target support handled by the dense Newton solve.
const NEWTON_MAX_DIM: usize = 1000;
/// Largest Levenberg damping, relative to the largest column mass.
const MAX_DAMPING: f64 = 1e30;

/// Sinkhorn iterations on a precomputed cost matrix, stabilized by
/// absorption: the potentials live in the log domain and are refreshed into
/// the kernel whenever the multiplicative scalings grow, with an exact
/// log-sum-exp update wherever the kernel underflows.
///
/// Near-permutation plans (small `eps`) can contract arbitrarily slowly;
/// after [`NEWTON_AFTER`] iterations the remaining budget goes to damped
/// Newton steps on the same dual problem.
fn solve(c: &Matrix, mu_w: &[f64], nu_w: &[f64], cfg: &SinkhornConfig) -> (Vec<f64>, Vec<f64>, usize, bool, f64) {
    let (m, n) = c.shape();
    let eps = cfg.epsilon;
    let (log_mu, log_nu) = (log_weights(mu_w), log_weights(nu_w));
    let ct = c.transpose();

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut kern = stabilized_kernel(c, &f, &g, eps);
    let (mut u, mut v) = (vec![1.0; m], vec![1.0; n]);
    let mut u_new = vec![0.0; m];
    let (mut x, mut y) = (vec![0.0; n], vec![0.0; m]);
    let mut err = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;
    let plain_budget = if n <= NEWTON_MAX_DIM { NEWTON_AFTER.min(cfg.max_iters) } else { cfg.max_iters };
    while iters < plain_budget {
        for j in 0..n {
            x[j] = nu_w[j] * v[j];
        }
        if row_scaling(&kern, &x, &mut u_new) {
            if iters > 0 {
                // Row marginal of the previous pair: mu_i * u_i / u_new_i.
                err = mu_w.iter().zip(u.iter().zip(&u_new)).map(|(w, (a, b))| w * (a / b - 1.0).abs()).sum();
            }
            std::mem::swap(&mut u, &mut u_new);
        } else {
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            exact_update(c.data(), &log_nu, &g, eps, &mut u_new);
            if iters > 0 {
                err = mu_w
                    .iter()
                    .zip(f.iter().zip(&u_new))
                    .map(|(w, (fo, fnew))| w * (((fo - fnew) / eps).exp() - 1.0).abs())
                    .sum();
            }
            f.copy_from_slice(&u_new);
            kern = stabilized_kernel(c, &f, &g, eps);
        }

        for i in 0..m {
            y[i] = mu_w[i] * u[i];
        }
        if !col_scaling(&kern, &y, &mut v) {
            v.fill(1.0);
            absorb(&mut f, &mut u, eps);
            exact_update(ct.data(), &log_mu, &f, eps, &mut g);
            kern = stabilized_kernel(c, &f, &g, eps);
        }
        iters += 1;
        if err < cfg.tol {
            converged = true;
            break;
        }
        if out_of_range(&u) || out_of_range(&v) {
            absorb(&mut f, &mut u, eps);
            absorb(&mut g, &mut v, eps);
            kern = stabilized_kernel(c, &f, &g, eps);
        }
    }
    absorb(&mut f, &mut u, eps);
    absorb(&mut g, &mut v, eps);
    if !converged && iters < cfg.max_iters {
        let out = newton(c, mu_w, nu_w, &log_nu, g, cfg, iters);
        return out;
    }
    (f, g, iters, converged, err)
}

/// `f(g)` and the plan it induces; rows of the plan sum exactly to `mu`.
fn semi_dual_state(c: &Matrix, mu_w: &[f64], nu_w: &[f64], log_nu: &[f64], g: &[f64], eps: f64) -> (Vec<f64>, Matrix, f64) {
    let (m, n) = c.shape();
    let mut f = vec![0.0; m];
    exact_update(c.data(), log_nu, g, eps, &mut f);
    let mut plan = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            plan[(i, j)] = mu_w[i] * (log_nu[j] + (f[i] + g[j] - c[(i, j)]) / eps).exp();
        }
    }
    let value = dual_value(mu_w, nu_w, &f, g);
    (f, plan, value)
}

/// Damped Newton ascent on the semi-dual `F(g) = <mu, f(g)> + <nu, g>`,
/// whose gradient is the column-marginal violation. The constant direction
/// is fixed by holding the last coordinate of `g`.
fn newton(
    c: &Matrix,
    mu_w: &[f64],
    nu_w: &[f64],
    log_nu: &[f64],
    mut g: Vec<f64>,
    cfg: &SinkhornConfig,
    mut iters: usize,
) -> (Vec<f64>, Vec<f64>, usize, bool, f64) {
    use nalgebra::{DMatrix, DVector};

    let (m, n) = c.shape();
    let eps = cfg.epsilon;
    let (mut f, mut plan, mut value) = semi_dual_state(c, mu_w, nu_w, log_nu, &g, eps);
    let violation = |plan: &Matrix| -> Vec<f64> {
        let cols = plan.col_sums();
        nu_w.iter().zip(&cols).map(|(a, b)| a - b).collect()
    };
    let mut grad = violation(&plan);
    let mut err: f64 = grad.iter().map(|v| v.abs()).sum();
    let mut converged = err < cfg.tol;
    let mut damping = 0.0;
    while !converged && iters < cfg.max_iters {
        iters += 1;
        let d = n - 1;
        if d == 0 {
            converged = true;
            break;
        }
        // -eps * Hessian = diag(col sums) - P^T diag(1/mu) P, restricted to the first n-1 coordinates.
        let cols = plan.col_sums();
        let mut h = DMatrix::<f64>::zeros(d, d);
        for i in 0..m {
            if mu_w[i] == 0.0 {
                continue;
            }
            let row = &plan.row(i)[..d];
            let inv = 1.0 / mu_w[i];
            for a in 0..d {
                let pa = row[a] * inv;
                if pa == 0.0 {
                    continue;
                }
                for b in 0..d {
                    h[(a, b)] -= pa * row[b];
                }
            }
        }
        for a in 0..d {
            h[(a, a)] += cols[a];
        }
        // Cancellation leaves errors relative to the column masses, not to
        // the (possibly vanishing) diagonal of `h`.
        let scale = cols[..d].iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let rhs = DVector::from_iterator(d, grad[..d].iter().map(|v| v * eps));
        // Columns whose mass has underflowed leave `h` nearly singular and
        // the Newton step far too long. A failed line search raises the
        // damping, bending the step toward plain gradient ascent.
        let mut accepted = None;
        while accepted.is_none() && damping <= MAX_DAMPING {
            let mut ridge = (1e-14 + damping) * scale;
            let step = loop {
                let mut hr = h.clone();
                for a in 0..d {
                    hr[(a, a)] += ridge;
                }
                if let Some(ch) = hr.cholesky() {
                    break Some(ch.solve(&rhs));
                }
                ridge *= 100.0;
                if ridge > MAX_DAMPING * scale {
                    break None;
                }
            };
            let Some(step) = step else { break };
            let slope: f64 = step.iter().zip(&grad).map(|(s, gr)| s * gr).sum();
            let mut t = 1.0;
            for _ in 0..40 {
                let mut trial = g.clone();
                for a in 0..d {
                    trial[a] += t * step[a];
                }
                let (tf, tp, tv) = semi_dual_state(c, mu_w, nu_w, log_nu, &trial, eps);
                let tgrad = violation(&tp);
                let terr: f64 = tgrad.iter().map(|v| v.abs()).sum();
                // Near the optimum F changes below rounding; progress in the
                // marginal violation then decides.
                if tv.is_finite() && (tv >= value + 1e-4 * t * slope || (terr < err && tv >= value - 1e-15 * value.abs())) {
                    accepted = Some((trial, tf, tp, tv, tgrad, terr));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_none() {
                damping = if damping == 0.0 { 1e-8 } else { damping * 100.0 };
            }
        }
        if accepted.is_some() {
            damping = if damping < 1e-10 { 0.0 } else { damping * 0.1 };
        }
        let Some((ng, nf, np, nv, ngrad, nerr)) = accepted else { break };
        g = ng;
        f = nf;
        plan = np;
        value = nv;
        grad = ngrad;
        err = nerr;
        converged = err < cfg.tol;
    }
    (f, g, iters, converged, err)
}

/// Symmetric problem `W(mu, mu)`: a single potential `f = g`, updated by the
/// averaged fixed point `f <- (f + T(f)) / 2`, which avoids the slow
/// oscillation plain alternating updates show on self-transport. Same
/// absorption scheme as [`solve`], with `f = f_bar + eps ln s`.
fn solve_symmetric(c: &Matrix, w: &[f64], cfg: &SinkhornConfig) -> (Vec<f64>, usize, bool, f64) {
    let m = c.rows();
    let eps = cfg.epsilon;
    let log_w = log_weights(w);
    let mut f = vec![0.0; m];
    let mut kern = stabilized_kernel(c, &f, &f, eps);
    let mut s = vec![1.0; m];
    let mut t = vec![0.0; m];
    let mut x = vec![0.0; m];
    let mut err = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        for j in 0..m {
            x[j] = w[j] * s[j];
        }
        iters += 1;
        if row_scaling(&kern, &x, &mut t) {
            // t_i = exp((T(f)_i - f_bar_i) / eps)
            err = w.iter().zip(s.iter().zip(&t)).map(|(wi, (a, b))| wi * (a / b - 1.0).abs()).sum();
            if err < cfg.tol {
                converged = true;
                break;
            }
            for (si, ti) in s.iter_mut().zip(&t) {
                *si = (*si * ti).sqrt();
            }
            if out_of_range(&s) {
                absorb(&mut f, &mut s, eps);
                kern = stabilized_kernel(c, &f, &f, eps);
            }
        } else {
            absorb(&mut f, &mut s, eps);
            exact_update(c.data(), &log_w, &f, eps, &mut t);
            err = w
                .iter()
                .zip(f.iter().zip(&t))
                .map(|(wi, (fo, tn))| wi * (((fo - tn) / eps).exp() - 1.0).abs())
                .sum();
            if err < cfg.tol {
                converged = true;
                break;
            }
            for (fi, ti) in f.iter_mut().zip(&t) {
                *fi = 0.5 * (*fi + ti);
            }
            kern = stabilized_kernel(c, &f, &f, eps);
        }
    }
    absorb(&mut f, &mut s, eps);
    (f, iters, converged, err)
}

fn dual_value(mu_w: &[f64], nu_w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let a: f64 = mu_w.iter().zip(f).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum();
    let b: f64 = nu_w.iter().zip(g).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum();
    a + b
}

fn plan_from_potentials(c: &Matrix, mu_w: &[f64], nu_w: &[f64], f: &[f64], g: &[f64], eps: f64) -> Matrix {
    let (m, n) = c.shape();
    let mut p = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            p[(i, j)] = mu_w[i] * nu_w[j] * ((f[i] + g[j] - c[(i, j)]) / eps).exp();
        }
    }
    p
}

fn sinkhorn_on_cost(
    c: &Matrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cfg: &SinkhornConfig,
    with_plan: bool,
) -> SinkhornResult {
    let (f, g, iters, converged, marginal_error) = if mu == nu {
        let (f, iters, converged, err) = solve_symmetric(c, &mu.weights, cfg);
        (f.clone(), f, iters, converged, err)
    } else {
        solve(c, &mu.weights, &nu.weights, cfg)
    };
    let cost = dual_value(&mu.weights, &nu.weights, &f, &g);
    let plan = with_plan.then(|| plan_from_potentials(c, &mu.weights, &nu.weights, &f, &g, cfg.epsilon));
    if !converged {
        log::debug!("sinkhorn stopped after {iters} iterations, marginal error {marginal_error:e}");
    }
    SinkhornResult {
        cost,
        f,
        g,
        plan,
        iters,
        converged,
        marginal_error,
    }
}

/// Entropic OT cost `W_eps(mu, nu)` and its dual potentials.
pub fn sinkhorn(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let c = cost_matrix(mu, nu, cfg.cost)?;
    Ok(sinkhorn_on_cost(&c, mu, nu, cfg, false))
}

/// Like [`sinkhorn`], also materializing the transport plan.
pub fn sinkhorn_with_plan(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    let c = cost_matrix(mu, nu, cfg.cost)?;
    Ok(sinkhorn_on_cost(&c, mu, nu, cfg, true))
}

fn assemble(w_xy: &SinkhornResult, w_xx: &SinkhornResult, w_yy: &SinkhornResult, cfg: &SinkhornConfig) -> Result<Divergence> {
    let value = 2.0 * w_xy.cost - w_xx.cost - w_yy.cost;
    let converged = w_xy.converged && w_xx.converged && w_yy.converged;
    if !value.is_finite() {
        return Err(Error::NonFinite("Sinkhorn divergence".into()));
    }
    if converged && value < -10.0 * cfg.tol {
        return Err(Error::invalid(format!(
            "Sinkhorn divergence {value:e} is below -10*tol despite converged solves"
        )));
    }
    Ok(Divergence {
        value,
        w_xy: w_xy.cost,
        w_xx: w_xx.cost,
        w_yy: w_yy.cost,
        converged,
        iters: [w_xy.iters, w_xx.iters, w_yy.iters],
    })
}

/// `S_eps(mu, nu) = 2 W(mu, nu) - W(mu, mu) - W(nu, nu)`.
///
/// Small negative values (down to `-10 * tol`) are returned as-is; anything
/// lower is an error unless some sub-solve failed to converge, which is
/// reported through [`Divergence::converged`].
pub fn sinkhorn_divergence(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<Divergence> {
    cfg.validate()?;
    let xy = sinkhorn(mu, nu, cfg)?;
    let xx = sinkhorn(mu, mu, cfg)?;
    let yy = sinkhorn(nu, nu, cfg)?;
    assemble(&xy, &xx, &yy, cfg)
}

/// Accumulates `scale * sum_j P_ij dC(x_i, y_j)/dx_i` into `grad` (m x k),
/// rebuilding each plan row from the potentials.
#[allow(clippy::too_many_arguments)]
fn accumulate_plan_gradient(
    grad: &mut Matrix,
    c: &Matrix,
    x: &DiscreteMeasure,
    y: &DiscreteMeasure,
    f: &[f64],
    g: &[f64],
    cfg: &SinkhornConfig,
    scale: f64,
    transpose_plan: bool,
) {
    let eps = cfg.epsilon;
    let dim = x.dim();
    let mut acc = vec![0.0; dim];
    for i in 0..x.len() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let xi = x.points.row(i);
        for j in 0..y.len() {
            let cij = c[(i, j)];
            // With transpose_plan the entry read is P_ji of the (y, x) problem.
            let p = if transpose_plan {
                y.weights[j] * x.weights[i] * ((f[j] + g[i] - cij) / eps).exp()
            } else {
                x.weights[i] * y.weights[j] * ((f[i] + g[j] - cij) / eps).exp()
            };
            if p == 0.0 {
                continue;
            }
            let yj = y.points.row(j);
            let coef = match cfg.cost {
                GroundCost::Euclidean => {
                    if cij == 0.0 {
                        continue;
                    }
                    p / cij
                }
                GroundCost::SquaredEuclidean => 2.0 * p,
            };
            for d in 0..dim {
                acc[d] += coef * (xi[d] - yj[d]);
            }
        }
        for (gd, a) in grad.row_mut(i).iter_mut().zip(&acc) {
            *gd += scale * a;
        }
    }
}

/// Divergence value and its gradient with respect to `mu`'s support
/// points (weights held fixed, `nu` treated as constant).
pub fn sinkhorn_divergence_with_grad(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cfg: &SinkhornConfig,
) -> Result<(Divergence, Matrix)> {
    cfg.validate()?;
    let c_xy = cost_matrix(mu, nu, cfg.cost)?;
    let c_xx = cost_matrix(mu, mu, cfg.cost)?;
    let xy = sinkhorn_on_cost(&c_xy, mu, nu, cfg, false);
    let xx = sinkhorn_on_cost(&c_xx, mu, mu, cfg, false);
    let yy = sinkhorn(nu, nu, cfg)?;
    let div = assemble(&xy, &xx, &yy, cfg)?;

    let mut grad = Matrix::zeros(mu.len(), mu.dim());
    accumulate_plan_gradient(&mut grad, &c_xy, mu, nu, &xy.f, &xy.g, cfg, 2.0, false);
    // W(mu, mu) sees the points in both slots: P_ij and P_ji both contribute.
    accumulate_plan_gradient(&mut grad, &c_xx, mu, mu, &xx.f, &xx.g, cfg, -1.0, false);
    accumulate_plan_gradient(&mut grad, &c_xx, mu, mu, &xx.f, &xx.g, cfg, -1.0, true);
    if !grad.is_finite() {
        return Err(Error::NonFinite("Sinkhorn divergence gradient".into()));
    }
    Ok((div, grad))
}

/// Gradient of `S_eps(mu, nu)` with respect to `mu`'s support points.
pub fn sinkhorn_divergence_grad(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<Matrix> {
    sinkhorn_divergence_with_grad(mu, nu, cfg).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_dirichlet, DirichletSpec, Rng};

    fn pts(rows: &[Vec<f64>]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_measure(rng: &mut Rng, m: usize, dim: usize) -> DiscreteMeasure {
        let data = (0..m * dim).map(|_| rng.uniform()).collect();
        DiscreteMeasure::uniform(Matrix::from_vec(m, dim, data).unwrap()).unwrap()
    }

    fn dirichlet_measure(rng: &mut Rng, alpha: f64, m: usize) -> DiscreteMeasure {
        let spec = DirichletSpec::symmetric(3, alpha).unwrap();
        DiscreteMeasure::uniform(sample_dirichlet(rng, &spec, m).unwrap().transpose()).unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(Matrix::zeros(0, 2), vec![]).is_err());
        assert!(DiscreteMeasure::new(Matrix::zeros(2, 2), vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(Matrix::zeros(2, 2), vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::new(Matrix::zeros(2, 2), vec![1.0]).is_err());
    }

    #[test]
    fn cost_matrix_cases() {
        let c = cost_matrix(&pts(&[vec![0.3, 0.2]]), &pts(&[vec![0.3, 0.2]]), GroundCost::Euclidean).unwrap();
        assert_eq!(c.data(), &[0.0]);
        let c = cost_matrix(&pts(&[vec![0.0, 0.0]]), &pts(&[vec![3.0, 4.0]]), GroundCost::Euclidean).unwrap();
        assert_eq!(c.data(), &[5.0]);
        assert!(cost_matrix(&pts(&[vec![0.0]]), &pts(&[vec![0.0, 1.0]]), GroundCost::Euclidean).is_err());
    }

    #[test]
    fn cost_matrix_matches_loop_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        let a = random_measure(&mut rng, 6, 5);
        let b = random_measure(&mut rng, 6, 5);
        let c = cost_matrix(&a, &b, GroundCost::Euclidean).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for d in 0..5 {
                    let diff = a.points()[(i, d)] - b.points()[(j, d)];
                    s += diff * diff;
                }
                assert!((c[(i, j)] - s.sqrt()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn near_equal_points_have_tiny_cost() {
        let x = pts(&[vec![1e8, 1.0]]);
        let y = pts(&[vec![1e8, 1.0 + 1e-6]]);
        let c = cost_matrix(&x, &y, GroundCost::Euclidean).unwrap();
        assert!((c[(0, 0)] - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn single_points_cost_is_distance() {
        for eps in [1e-3, 1e-1, 10.0] {
            let r = sinkhorn(&pts(&[vec![0.0, 0.0]]), &pts(&[vec![3.0, 4.0]]), &SinkhornConfig::with_epsilon(eps)).unwrap();
            assert!((r.cost - 5.0).abs() < 1e-12, "{}", r.cost);
            assert!(r.converged);
        }
    }

    #[test]
    fn self_transport_has_entropic_bias() {
        let mut rng = Rng::seed_from_u64(1);
        let mu = dirichlet_measure(&mut rng, 1.0, 20);
        let r = sinkhorn_with_plan(&mu, &mu, &SinkhornConfig::with_epsilon(0.1)).unwrap();
        assert!(r.converged);
        assert!(r.cost > 0.0);
        let plan = r.plan.unwrap();
        assert!(plan.min() >= 0.0);
        let marg: f64 = plan.row_sums().iter().zip(mu.weights()).map(|(a, b)| (a - b).abs()).sum();
        assert!(marg < 1e-8);
        let marg: f64 = plan.col_sums().iter().zip(mu.weights()).map(|(a, b)| (a - b).abs()).sum();
        assert!(marg < 1e-8);
    }

    #[test]
    fn entropic_bias_shrinks_with_epsilon() {
        let mut rng = Rng::seed_from_u64(2);
        let mu = dirichlet_measure(&mut rng, 2.0, 15);
        let mut last = f64::INFINITY;
        for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let cfg = SinkhornConfig {
                max_iters: 50_000,
                ..SinkhornConfig::with_epsilon(eps)
            };
            let w = sinkhorn(&mu, &mu, &cfg).unwrap().cost;
            assert!(w < last, "eps {eps}: {w} !< {last}");
            last = w;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn divergence_of_measure_with_itself_is_zero() {
        let mut rng = Rng::seed_from_u64(3);
        let mu = dirichlet_measure(&mut rng, 4.0, 30);
        let d = sinkhorn_divergence(&mu, &mu, &SinkhornConfig::default()).unwrap();
        assert!(d.value.abs() <= 1e-9);
    }

    #[test]
    fn concentrated_vs_uniform_prior_is_separated() {
        // Median over 20 seeds: S(D(4), D(1)) > S(D(4), D(4)') > 0.
        let cfg = SinkhornConfig::default();
        let mut wins = 0;
        let mut diffs = Vec::new();
        for seed in 0..20 {
            let mut rng = Rng::seed_from_u64(100 + seed);
            let a = dirichlet_measure(&mut rng, 4.0, 50);
            let b = dirichlet_measure(&mut rng, 1.0, 50);
            let a2 = dirichlet_measure(&mut rng, 4.0, 50);
            let far = sinkhorn_divergence(&a, &b, &cfg).unwrap().value;
            let near = sinkhorn_divergence(&a, &a2, &cfg).unwrap().value;
            assert!(far > 0.0);
            diffs.push(far - near);
            if far > near {
                wins += 1;
            }
        }
        diffs.sort_by(f64::total_cmp);
        assert!(diffs[10] > 0.0);
        assert!(wins >= 15, "{wins}");
    }

    #[test]
    fn single_point_gradient_is_twice_unit_direction() {
        let mu = pts(&[vec![0.2, 0.5, 0.3]]);
        let nu = pts(&[vec![0.6, 0.1, 0.3]]);
        let g = sinkhorn_divergence_grad(&mu, &nu, &SinkhornConfig::default()).unwrap();
        let d = ((0.4f64).powi(2) * 2.0).sqrt();
        let expected = [2.0 * -0.4 / d, 2.0 * 0.4 / d, 0.0];
        for (a, b) in g.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_vanishes_at_identical_measures() {
        let mut rng = Rng::seed_from_u64(4);
        let mu = dirichlet_measure(&mut rng, 4.0, 12);
        let g = sinkhorn_divergence_grad(&mu, &mu.clone(), &SinkhornConfig::default()).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn squared_cost_switch() {
        let cfg = SinkhornConfig {
            cost: GroundCost::SquaredEuclidean,
            ..Default::default()
        };
        let r = sinkhorn(&pts(&[vec![0.0, 0.0]]), &pts(&[vec![3.0, 4.0]]), &cfg).unwrap();
        assert!((r.cost - 25.0).abs() < 1e-9);
    }

    #[test]
    fn bad_config_rejected() {
        let mu = pts(&[vec![0.0]]);
        for cfg in [
            SinkhornConfig::with_epsilon(0.0),
            SinkhornConfig { tol: 0.0, ..Default::default() },
            SinkhornConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(sinkhorn(&mu, &mu, &cfg).is_err());
        }
    }

    #[test]
    fn nonconvergence_is_flagged() {
        let mut rng = Rng::seed_from_u64(6);
        let a = dirichlet_measure(&mut rng, 1.0, 20);
        let b = dirichlet_measure(&mut rng, 1.0, 20);
        let cfg = SinkhornConfig {
            max_iters: 2,
            ..SinkhornConfig::with_epsilon(1e-3)
        };
        let r = sinkhorn(&a, &b, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iters, 2);
    }

    #[test]
    fn small_epsilon_unbalanced_sizes_converge() {
        let mut rng = Rng::seed_from_u64(31);
        let cfg = SinkhornConfig::with_epsilon(1e-3);
        for (m, n) in [(9, 27), (27, 9), (5, 30), (30, 5), (11, 2), (2, 11)] {
            for _ in 0..5 {
                let a = dirichlet_measure(&mut rng, 1.0, m);
                let b = dirichlet_measure(&mut rng, 1.0, n);
                let ab = sinkhorn(&a, &b, &cfg).unwrap();
                let ba = sinkhorn(&b, &a, &cfg).unwrap();
                assert!(ab.converged && ba.converged, "{m}x{n}: {:e} {:e}", ab.marginal_error, ba.marginal_error);
                assert!((ab.cost - ba.cost).abs() <= 1e-9, "{m}x{n}: {} {}", ab.cost, ba.cost);
            }
        }
        // One of the 11 points must split its mass, so the optimum sits
        // where the Hessian cancels to rounding noise.
        let mut rng = Rng::seed_from_u64(14303036370905056059);
        let a = random_measure(&mut rng, 11, 3);
        let b = random_measure(&mut rng, 2, 3);
        assert!(sinkhorn(&a, &b, &cfg).unwrap().converged);
    }
}
