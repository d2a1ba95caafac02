//! NFINDR endmember extraction: choose the `k` pixels spanning the
//! largest simplex in a `(k-1)`-dimensional PCA projection of the data.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const MAX_START_DRAWS: usize = 100;

/// Principal subspace of a column cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `l x d`, orthonormal columns sorted by decreasing variance.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.components.cols()
    }

    /// `d x n` coordinates of the centered columns of `y`.
    pub fn project(&self, y: &Matrix) -> Result<Matrix> {
        let (l, n) = y.shape();
        if l != self.mean.len() {
            return Err(Error::Shape {
                op: "pca project",
                left: y.shape(),
                right: self.components.shape(),
            });
        }
        let d = self.dim();
        let mut out = Matrix::zeros(d, n);
        for i in 0..l {
            let row = y.row(i);
            let mu = self.mean[i];
            let comp = self.components.row(i);
            for (c, &w) in comp.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(c);
                for (o, &v) in out_row.iter_mut().zip(row) {
                    *o += w * (v - mu);
                }
            }
        }
        Ok(out)
    }

    /// Maps `d x n` coordinates back to the original space.
    pub fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        let mut y = crate::numerics::mat_mul(&self.components, z)?;
        for i in 0..y.rows() {
            let mu = self.mean[i];
            y.row_mut(i).iter_mut().for_each(|v| *v += mu);
        }
        Ok(y)
    }
}

/// Top-`d` principal directions of the columns of `y` (`l x n`), from the
/// eigendecomposition of the sample covariance. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_fit(y: &Matrix, d: usize) -> Result<PcaBasis> {
    let (l, n) = y.shape();
    if d == 0 || d > l.min(n) {
        return Err(Error::invalid(format!("PCA dimension {d} must lie in 1..={}", l.min(n))));
    }
    let mean: Vec<f64> = (0..l).map(|i| y.row(i).iter().sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = (0..l).map(|i| y.row(i).iter().map(|v| v - mean[i]).collect()).collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = DMatrix::<f64>::zeros(l, l);
    for a in 0..l {
        for b in a..l {
            let s: f64 = centered[a].iter().zip(&centered[b]).map(|(x, z)| x * z).sum::<f64>() / denom;
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_floor = top * 1e-12 * l as f64;
    let mut components = Matrix::zeros(l, d);
    let mut explained_variance = Vec::with_capacity(d);
    for (c, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > rank_floor) {
            return Err(Error::invalid(format!(
                "PCA dimension {d} exceeds the numerical rank of the data (component {c} has variance {lambda:e})"
            )));
        }
        let v = eig.eigenvectors.column(idx);
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..l {
            components[(i, c)] = sign * v[i];
        }
        explained_variance.push(lambda);
    }
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfindrResult {
    /// Pixel indices of the selected vertices.
    pub indices: Vec<usize>,
    /// `l x k`, the selected columns of `Y`.
    pub endmembers: Matrix,
    pub volume: f64,
    pub sweeps: usize,
    /// Simplex volume after the start and after each accepted swap.
    pub volume_history: Vec<f64>,
}

/// Determinant by Gaussian elimination with partial pivoting (row-major `n x n`).
fn determinant(mut a: Vec<f64>, n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap();
        let pv = a[pivot * n + col];
        if pv == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            det = -det;
        }
        det *= pv;
        for r in col + 1..n {
            let factor = a[r * n + col] / pv;
            if factor != 0.0 {
                for c in col..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
            }
        }
    }
    det
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Volume of the simplex whose vertices are the listed columns of `z` (`(k-1) x n`).
fn simplex_volume(z: &Matrix, vertices: &[usize]) -> f64 {
    let d = z.rows();
    debug_assert_eq!(vertices.len(), d + 1);
    let base = vertices[0];
    let mut edges = vec![0.0; d * d];
    for (e, &v) in vertices[1..].iter().enumerate() {
        for r in 0..d {
            edges[r * d + e] = z[(r, v)] - z[(r, base)];
        }
    }
    determinant(edges, d).abs() / factorial(d)
}

/// Single NFINDR run from a random start.
pub fn nfindr(y: &Matrix, k: usize, rng: &mut Rng, max_sweeps: usize) -> Result<NfindrResult> {
    let n = y.cols();
    if k < 2 {
        return Err(Error::invalid("NFINDR needs k >= 2"));
    }
    if n < k {
        return Err(Error::invalid(format!("NFINDR needs at least k = {k} pixels, got {n}")));
    }
    let pca = pca_fit(y, k - 1)?;
    let z = pca.project(y)?;

    let mut vertices = Vec::new();
    let mut volume = 0.0;
    for _ in 0..MAX_START_DRAWS {
        let mut all: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: only the first k slots are needed.
        for i in 0..k {
            let j = i + rng.below(n - i);
            all.swap(i, j);
        }
        vertices = all[..k].to_vec();
        volume = simplex_volume(&z, &vertices);
        if volume > 0.0 {
            break;
        }
    }
    if !(volume > 0.0) {
        return Err(Error::Infeasible(format!(
            "{MAX_START_DRAWS} random NFINDR starts all spanned zero volume"
        )));
    }

    let mut history = vec![volume];
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for p in 0..k {
            let original = vertices[p];
            let mut best = (volume, original);
            for j in 0..n {
                if vertices.contains(&j) {
                    continue;
                }
                vertices[p] = j;
                let v = simplex_volume(&z, &vertices);
                if v > best.0 {
                    best = (v, j);
                }
            }
            vertices[p] = best.1;
            if best.1 != original {
                volume = best.0;
                history.push(volume);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(NfindrResult {
        endmembers: y.select_columns(&vertices),
        indices: vertices,
        volume,
        sweeps,
        volume_history: history,
    })
}

/// Best of `restarts` NFINDR runs, each on its own forked stream; ties go
/// to the earliest restart.
pub fn nfindr_restarts(y: &Matrix, k: usize, rng: &mut Rng, max_sweeps: usize, restarts: usize) -> Result<NfindrResult> {
    let restarts = restarts.max(1);
    let base = rng.clone();
    let mut best: Option<NfindrResult> = None;
    for r in 0..restarts {
        let mut stream = if r == 0 { rng.clone() } else { base.fork(r as u64) };
        let res = nfindr(y, k, &mut stream, max_sweeps)?;
        if r == 0 {
            *rng = stream;
        }
        if best.as_ref().is_none_or(|b| res.volume > b.volume) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}
