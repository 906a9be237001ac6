//! Diffusion matrices, eigen-structure, and frozen-coefficient Gaussians.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{BoxDomain, Coefficients, VectorFieldSet};
use crate::grid::{DensityGrid, Method, TensorGrid};
use crate::hoermander::{sample_points, Sampling};

/// Relative threshold below which an eigenvalue counts as degenerate.
pub const EPS_LAMBDA: f64 = 1e-10;
/// Relative floor used for near-degenerate inverses inside quadratures.
pub const EPS_REG: f64 = 1e-8;

/// x -> a(x) together with its eigen-structure.
#[derive(Clone)]
pub struct DiffusionMatrix {
    coeffs: Arc<dyn Coefficients>,
}

/// Eigenvalues sorted descending and rotation D with Lambda = D a D^T.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub lambda: Vec<f64>,
    /// Rows are eigenvectors.
    pub d: DMatrix<f64>,
}

impl DiffusionMatrix {
    pub fn new(coeffs: Arc<dyn Coefficients>) -> Self {
        DiffusionMatrix { coeffs }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    pub fn at(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = vec![0.0; n * n];
        self.coeffs.diffusion(x, &mut a);
        DMatrix::from_row_slice(n, n, &a)
    }

    pub fn eigendecompose(&self, x: &[f64]) -> Result<Eigen> {
        eigendecompose(&self.at(x))
    }
}

/// Sum of sigma_i sigma_i^T over the diffusion columns.
pub fn assemble_diffusion(fields: &VectorFieldSet) -> Result<DiffusionMatrix> {
    if fields.diffusion_count() == 0 {
        return Err(Error::Invalid("no diffusion columns".into()));
    }
    Ok(DiffusionMatrix::new(Arc::new(fields.clone())))
}

/// Symmetric eigendecomposition, eigenvalues descending, tiny negatives clipped.
pub fn eigendecompose(a: &DMatrix<f64>) -> Result<Eigen> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("diffusion matrix entry".into()));
    }
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| e.eigenvalues[j].partial_cmp(&e.eigenvalues[i]).unwrap());
    let scale = e.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut lambda = Vec::with_capacity(n);
    let mut d = DMatrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let mut l = e.eigenvalues[i];
        if l < 0.0 {
            if l < -1e-12 * scale {
                return Err(Error::Invalid(format!("matrix is not positive semidefinite (eigenvalue {l})")));
            }
            l = 0.0;
        }
        lambda.push(l);
        for c in 0..n {
            d[(r, c)] = e.eigenvectors[(c, i)];
        }
    }
    Ok(Eigen { lambda, d })
}

/// Fraction of sampled points with min eigenvalue <= eps, for each eps.
pub fn degeneracy_probe(a: &DiffusionMatrix, domain: &BoxDomain, samples: usize, eps: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples == 0 {
        return Err(Error::Invalid("samples must be at least 1".into()));
    }
    let pts = sample_points(domain, samples, Sampling::Halton)?;
    let mins: Vec<f64> = pts
        .iter()
        .map(|p| a.eigendecompose(p).map(|e| *e.lambda.last().unwrap()))
        .collect::<Result<_>>()?;
    Ok(eps
        .iter()
        .map(|&e| (e, mins.iter().filter(|&&m| m <= e).count() as f64 / samples as f64))
        .collect())
}

/// Leading Gaussian with coefficients frozen at y.
#[derive(Clone, Debug, Serialize)]
pub struct FrozenGaussian {
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Rows are eigenvectors of a(y).
    #[serde(skip)]
    pub d: DMatrix<f64>,
    pub degenerate: Vec<bool>,
    pub eps_lambda: f64,
    pub eps_reg: f64,
    inv: Vec<f64>,
    inv_reg: Vec<f64>,
    det: f64,
    det_reg: f64,
}

fn inverse_from_eigen(e: &Eigen, floor: f64) -> (Vec<f64>, f64) {
    let n = e.lambda.len();
    let mut inv = vec![0.0; n * n];
    let mut det = 1.0;
    for (k, &l) in e.lambda.iter().enumerate() {
        let l = l.max(floor);
        det *= l;
        for r in 0..n {
            for c in 0..n {
                inv[r * n + c] += e.d[(k, r)] * e.d[(k, c)] / l;
            }
        }
    }
    (inv, det)
}

/// exp(-z^T inv z / (4 tau)) / sqrt((4 pi tau)^n det).
pub fn gaussian(inv: &[f64], det: f64, z: &[f64], tau: f64) -> f64 {
    let n = z.len();
    let mut q = 0.0;
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += inv[r * n + c] * z[c];
        }
        q += z[r] * s;
    }
    (-(q / (4.0 * tau))).exp() / ((4.0 * PI * tau).powi(n as i32) * det).sqrt()
}

impl FrozenGaussian {
    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// a(y)^{-1}, row-major (meaningful only when nondegenerate).
    pub fn inverse(&self) -> &[f64] {
        &self.inv
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// N_0(t, x; s, y); identically 0 when y is degenerate.
    pub fn value(&self, t: f64, x: &[f64], s: f64) -> Result<f64> {
        if t <= s {
            return Err(Error::BadTime { t, s });
        }
        if self.is_degenerate() {
            return Ok(0.0);
        }
        let z: Vec<f64> = x.iter().zip(&self.y).map(|(a, b)| a - b).collect();
        Ok(gaussian(&self.inv, self.det, &z, t - s))
    }

    /// Value with eigenvalues floored at eps_reg.
    pub fn regularized_value(&self, t: f64, x: &[f64], s: f64) -> Result<f64> {
        if t <= s {
            return Err(Error::BadTime { t, s });
        }
        let z: Vec<f64> = x.iter().zip(&self.y).map(|(a, b)| a - b).collect();
        Ok(gaussian(&self.inv_reg, self.det_reg, &z, t - s))
    }

    /// Values on a grid, as a density grid tagged exact.
    pub fn on_grid(&self, t: f64, s: f64, grid: &TensorGrid, model: &str) -> Result<DensityGrid> {
        let mut x = vec![0.0; grid.dim()];
        let mut v = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            grid.point(k, &mut x);
            v.push(self.value(t, &x, s)?);
        }
        let mut g = DensityGrid::new(Method::Exact, model, &self.y, t, grid.clone(), v);
        g.s = s;
        Ok(g)
    }

    /// Truncation radius 6 sqrt(2 lambda_max (t - s)).
    pub fn radius(&self, t: f64, s: f64) -> f64 {
        6.0 * (2.0 * self.lambda[0] * (t - s)).sqrt()
    }
}

/// Freeze a(y).
pub fn frozen_gaussian(a: &DiffusionMatrix, y: &[f64]) -> Result<FrozenGaussian> {
    frozen_gaussian_from(&a.at(y), y)
}

/// Freeze a given constant matrix at y.
pub fn frozen_gaussian_from(a: &DMatrix<f64>, y: &[f64]) -> Result<FrozenGaussian> {
    let e = eigendecompose(a)?;
    let lmax = e.lambda[0];
    let eps_lambda = EPS_LAMBDA * lmax;
    let eps_reg = EPS_REG * lmax.max(f64::MIN_POSITIVE);
    let degenerate: Vec<bool> = e.lambda.iter().map(|&l| l <= eps_lambda).collect();
    let (inv, det) = inverse_from_eigen(&e, 0.0);
    let (inv_reg, det_reg) = inverse_from_eigen(&e, eps_reg);
    Ok(FrozenGaussian {
        y: y.to_vec(),
        lambda: e.lambda,
        d: e.d,
        degenerate,
        eps_lambda,
        eps_reg,
        inv,
        inv_reg,
        det,
        det_reg,
    })
}

/// Diagonal diffusion frozen on a coordinate subset plus the drift left on
/// the remaining coordinates.
#[derive(Clone, Debug, Serialize)]
pub struct PartialFrozen {
    pub y: Vec<f64>,
    /// Frozen coordinates (0-based) with their diffusion a_ii(y).
    pub frozen: Vec<usize>,
    pub lambda: Vec<f64>,
    /// Coordinates carrying the residual drift.
    pub residual: Vec<usize>,
    /// (j, i, V0_j(y) * lambda_i(y), dV0_j/dy_i(y)) per residual coordinate j.
    pub witnesses: Vec<(usize, usize, f64, f64)>,
}

/// Check the frozen-block conditions at y and describe the leading operator
/// d_t p = sum_{i frozen} a_ii(y) d_ii p + sum_{j not frozen} V0_j d_j p.
pub fn partial_frozen_leading(c: &dyn Coefficients, y: &[f64], frozen: &[usize]) -> Result<PartialFrozen> {
    let n = c.dim();
    if y.len() != n {
        return Err(Error::Invalid("freeze point has the wrong dimension".into()));
    }
    let mut fz: Vec<usize> = frozen.to_vec();
    fz.sort_unstable();
    fz.dedup();
    if fz.is_empty() || fz.iter().any(|&i| i >= n) {
        return Err(Error::Invalid("frozen set must be a non-empty subset of coordinates".into()));
    }
    let mut a = vec![0.0; n * n];
    c.diffusion(y, &mut a);
    let amax = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    for r in 0..n {
        for col in 0..n {
            if r != col && a[r * n + col].abs() > 1e-12 * amax.max(1.0) {
                return Err(Error::Invalid("a(y) is not diagonal; rotate coordinates first".into()));
            }
        }
    }
    let eps = EPS_LAMBDA * amax;
    let lambda: Vec<f64> = fz.iter().map(|&i| a[i * n + i]).collect();
    if let Some((i, l)) = fz.iter().zip(&lambda).find(|(_, &l)| l <= eps) {
        return Err(Error::Witness(format!("frozen coordinate {i} has lambda {l} <= {eps}")));
    }
    let residual: Vec<usize> = (0..n).filter(|i| !fz.contains(i)).collect();
    let mut witnesses = Vec::new();
    if !residual.is_empty() {
        let mut b = vec![0.0; n];
        c.drift(y, &mut b);
        let jac = c.drift_jacobian(y)?;
        for &j in &residual {
            let w = fz
                .iter()
                .zip(&lambda)
                .map(|(&i, &l)| (i, b[j] * l, jac[j * n + i]))
                .find(|&(_, bl, d)| bl != 0.0 && d != 0.0);
            match w {
                Some((i, bl, d)) => witnesses.push((j, i, bl, d)),
                None => {
                    return Err(Error::Witness(format!(
                        "no frozen coordinate witnesses drift component {j} at {y:?} (V0_j = {})",
                        b[j]
                    )))
                }
            }
        }
    }
    Ok(PartialFrozen { y: y.to_vec(), frozen: fz, lambda, residual, witnesses })
}
