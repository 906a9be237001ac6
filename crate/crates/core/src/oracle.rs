//! Independent ground truth: Euler-Maruyama sampling with a kernel density
//! estimate, and the exact Gaussian kernel of linear-drift models.
//!
//! SDE dictionary: dX = -V_0(X) dt + sqrt(2) sum_j sigma_j(X) dW^j, so the
//! kernel covariance of a constant-coefficient model is 2 a t.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{Coefficients, VectorFieldSet};
use crate::grid::{DensityGrid, Method, TensorGrid};

/// Simulation request.
#[derive(Clone)]
pub struct SdeSpec {
    pub fields: Arc<VectorFieldSet>,
    pub x: Vec<f64>,
    pub t: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl SdeSpec {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.paths == 0 {
            return Err(Error::Invalid("steps and paths must be >= 1".into()));
        }
        if !(self.t > 0.0) {
            return Err(Error::BadTime { t: self.t, s: 0.0 });
        }
        if self.x.len() != self.fields.dim() {
            return Err(Error::Invalid("start point has the wrong dimension".into()));
        }
        Ok(())
    }
}

/// Terminal points of the surviving paths.
#[derive(Clone, Debug, Serialize)]
pub struct Samples {
    pub dim: usize,
    /// Row-major, `dim` values per path.
    pub points: Vec<f64>,
    /// Paths dropped for a non-finite state.
    pub excluded: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.dim;
        let mut m = vec![0.0; n];
        for k in 0..self.len() {
            for (i, v) in self.get(k).iter().enumerate() {
                m[i] += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }

    /// Unbiased sample covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim;
        let mu = self.mean();
        let mut c = vec![0.0; n * n];
        for k in 0..self.len() {
            let p = self.get(k);
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] += (p[i] - mu[i]) * (p[j] - mu[j]);
                }
            }
        }
        let d = (self.len() as f64 - 1.0).max(1.0);
        c.iter_mut().for_each(|v| *v /= d);
        c
    }

    /// Write as CSV with header x1..xn.
    pub fn to_csv(&self) -> String {
        let mut s: String = (1..=self.dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for k in 0..self.len() {
            s.push_str(&self.get(k).iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

/// Euler-Maruyama terminal samples; path k draws from ChaCha8 stream k of
/// `seed`, so results do not depend on scheduling.
pub fn euler_maruyama(spec: &SdeSpec) -> Result<Samples> {
    spec.validate()?;
    let f = &spec.fields;
    let n = f.dim();
    let m = f.diffusion_count();
    let dt = spec.t / spec.steps as f64;
    let sq = (2.0 * dt).sqrt();
    let paths: Vec<Option<Vec<f64>>> = (0..spec.paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let mut x = spec.x.clone();
            let mut b = vec![0.0; n];
            let mut col = vec![0.0; n];
            let mut inc = vec![0.0; n];
            let mut dw = vec![0.0; m];
            for _ in 0..spec.steps {
                f.eval_into(0, &x, &mut b);
                for w in dw.iter_mut() {
                    *w = StandardNormal.sample(&mut rng);
                }
                for i in 0..n {
                    inc[i] = -b[i] * dt;
                }
                for (j, w) in dw.iter().enumerate() {
                    f.eval_into(j + 1, &x, &mut col);
                    for i in 0..n {
                        inc[i] += sq * col[i] * w;
                    }
                }
                for i in 0..n {
                    x[i] += inc[i];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return None;
                }
            }
            Some(x)
        })
        .collect();
    let mut points = Vec::with_capacity(spec.paths * n);
    let mut excluded = 0;
    for p in paths {
        match p {
            Some(x) => points.extend(x),
            None => excluded += 1,
        }
    }
    Ok(Samples { dim: n, points, excluded })
}

/// KDE bandwidth rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Bandwidth {
    /// Scott's rule per coordinate with a one-cell floor.
    Scott,
    /// Fixed bandwidth per coordinate (still floored at one cell).
    Fixed(f64),
}

/// Gaussian KDE on a grid: linear binning followed by separable
/// convolution.
pub fn kde_density(samples: &Samples, grid: &TensorGrid, rule: Bandwidth, model: &str, y: &[f64], t: f64) -> Result<DensityGrid> {
    let n = grid.dim();
    if samples.dim != n {
        return Err(Error::Invalid("sample dimension does not match the grid".into()));
    }
    if samples.len() < 1000 {
        return Err(Error::Invalid(format!("KDE needs at least 1000 samples, got {}", samples.len())));
    }
    let cov = samples.covariance();
    let count = samples.len() as f64;
    let mut floored = Vec::new();
    let bw: Vec<f64> = (0..n)
        .map(|i| {
            let h = grid.axes[i].h();
            let raw = match rule {
                Bandwidth::Scott => cov[i * n + i].max(0.0).sqrt() * count.powf(-1.0 / (n as f64 + 4.0)),
                Bandwidth::Fixed(b) => b,
            };
            if raw < h {
                floored.push(i);
            }
            raw.max(h)
        })
        .collect();
    // linear binning
    let mut bins = vec![0.0; grid.len()];
    let mut kept = 0usize;
    'outer: for k in 0..samples.len() {
        let p = samples.get(k);
        let mut base = [0usize; 8];
        let mut frac = [0.0; 8];
        for d in 0..n {
            let ax = &grid.axes[d];
            let u = (p[d] - ax.lo) / ax.h();
            if !(u >= 0.0) || u > (ax.n - 1) as f64 {
                continue 'outer;
            }
            let i = (u.floor() as usize).min(ax.n - 2);
            base[d] = i;
            frac[d] = u - i as f64;
        }
        kept += 1;
        for c in 0..(1usize << n) {
            let mut flat = 0;
            let mut w = 1.0;
            for d in 0..n {
                let bit = (c >> d) & 1;
                flat += (base[d] + bit) * grid.stride(d);
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            bins[flat] += w;
        }
    }
    let mut v = bins;
    for d in 0..n {
        let h = grid.axes[d].h();
        let r = (5.0 * bw[d] / h).ceil() as isize;
        let kern: Vec<f64> = (-r..=r)
            .map(|k| {
                let z = k as f64 * h / bw[d];
                (-0.5 * z * z).exp()
            })
            .collect();
        let s: f64 = kern.iter().sum();
        let stride = grid.stride(d);
        let nd = grid.axes[d].n as isize;
        let src = v.clone();
        v = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let i = ((k / stride) % nd as usize) as isize;
                let base = k - i as usize * stride;
                let mut acc = 0.0;
                for (o, w) in kern.iter().enumerate() {
                    let j = i + o as isize - r;
                    if j >= 0 && j < nd {
                        acc += w * src[base + j as usize * stride];
                    }
                }
                acc / s
            })
            .collect();
    }
    let vol = grid.cell_volume() * count;
    v.iter_mut().for_each(|x| *x /= vol);
    let mut g = DensityGrid::new(Method::MonteCarlo { paths: samples.len(), steps: 0, seed: 0 }, model, y, t, grid.clone(), v);
    g.meta.insert("bandwidth".into(), serde_json::json!(bw));
    g.meta.insert("bandwidth_floored".into(), serde_json::json!(floored));
    g.meta.insert("samples_in_grid".into(), serde_json::json!(kept));
    g.meta.insert("mass".into(), serde_json::json!(g.mass()));
    Ok(g)
}

/// Gaussian with mean e^{Bt} x and covariance Q(t).
#[derive(Clone, Debug, Serialize)]
pub struct LinearGaussian {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Row-major.
    pub cov: Vec<f64>,
}

impl LinearGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn det(&self) -> f64 {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.cov).determinant()
    }

    /// Density; errors when Q(t) is singular.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        let n = self.dim();
        let q = DMatrix::from_row_slice(n, n, &self.cov);
        let det = q.determinant();
        let inv = q.try_inverse().filter(|_| det > 0.0).ok_or_else(|| Error::Invalid("covariance is singular".into()))?;
        let z = nalgebra::DVector::from_iterator(n, x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let e = (z.transpose() * inv * &z)[(0, 0)];
        Ok((-0.5 * e).exp() / ((2.0 * std::f64::consts::PI).powi(n as i32) * det).sqrt())
    }

    pub fn on_grid(&self, grid: &TensorGrid, model: &str, y: &[f64]) -> Result<DensityGrid> {
        let v = grid.points().iter().map(|p| self.density(p)).collect::<Result<Vec<_>>>()?;
        let mut g = DensityGrid::new(Method::Exact, model, y, self.t, grid.clone(), v);
        g.meta.insert("mean".into(), serde_json::json!(self.mean));
        g.meta.insert("covariance".into(), serde_json::json!(self.cov));
        Ok(g)
    }
}

/// e^M by scaling and squaring with a degree-18 Taylor core.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.abs().row_sum().max();
    let k = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(k);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for j in 1..=18 {
        term = &term * &a / j as f64;
        sum += &term;
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    sum
}

/// Exact kernel of dX = BX dt + sqrt(2) sigma dW with a = sigma sigma^T:
/// mean e^{Bt} x, Q' = BQ + QB^T + 2a integrated by RK4.
pub fn exact_linear_kernel(b: &DMatrix<f64>, a: &DMatrix<f64>, t: f64, x: &[f64]) -> Result<LinearGaussian> {
    let n = b.nrows();
    if b.ncols() != n || a.shape() != (n, n) || x.len() != n {
        return Err(Error::Invalid("B, a and x must agree in dimension".into()));
    }
    if !(t > 0.0) {
        return Err(Error::BadTime { t, s: 0.0 });
    }
    let mean = expm(&(b * t)) * nalgebra::DVector::from_column_slice(x);
    let rhs = |q: &DMatrix<f64>| b * q + q * b.transpose() + a * 2.0;
    let steps = 2000;
    let h = t / steps as f64;
    let mut q = DMatrix::zeros(n, n);
    for _ in 0..steps {
        let k1 = rhs(&q);
        let k2 = rhs(&(&q + &k1 * (0.5 * h)));
        let k3 = rhs(&(&q + &k2 * (0.5 * h)));
        let k4 = rhs(&(&q + &k3 * h));
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let q = (&q + q.transpose()) * 0.5;
    let mut cov = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            cov[r * n + c] = q[(r, c)];
        }
    }
    Ok(LinearGaussian { t, mean: mean.iter().copied().collect(), cov })
}

/// SDE drift matrix B = -D V_0 and constant a for a linear model; errors if
/// V_0(0) != 0, or if D V_0 or a vary between y and a nearby point.
pub fn linear_parts(c: &dyn Coefficients, y: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = c.dim();
    let mut v = vec![0.0; n];
    c.drift(&vec![0.0; n], &mut v);
    if v.iter().any(|x| x.abs() > 1e-12) {
        return Err(Error::Invalid("drift is not linear (V0(0) != 0)".into()));
    }
    let probe: Vec<f64> = y.iter().map(|v| v + 0.37).collect();
    let j0 = c.drift_jacobian(y)?;
    let j1 = c.drift_jacobian(&probe)?;
    let (mut a0, mut a1) = (vec![0.0; n * n], vec![0.0; n * n]);
    c.diffusion(y, &mut a0);
    c.diffusion(&probe, &mut a1);
    let diff = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff(&j0, &j1) > 1e-8 || diff(&a0, &a1) > 1e-12 {
        return Err(Error::Invalid("model is not linear with constant diffusion".into()));
    }
    Ok((-DMatrix::from_row_slice(n, n, &j0), DMatrix::from_row_slice(n, n, &a0)))
}

/// Exact kernel for a linear model started at y.
pub fn linear_kernel_for(c: &dyn Coefficients, y: &[f64], t: f64) -> Result<LinearGaussian> {
    let (b, a) = linear_parts(c, y)?;
    exact_linear_kernel(&b, &a, t, y)
}

/// Exact moments of the Euler-Maruyama chain for a linear model:
/// m_{k+1} = (I + B dt) m_k, P_{k+1} = (I + B dt) P_k (I + B dt)^T + 2 a dt.
pub fn em_moments_linear(b: &DMatrix<f64>, a: &DMatrix<f64>, x: &[f64], t: f64, steps: usize) -> LinearGaussian {
    let n = b.nrows();
    let dt = t / steps as f64;
    let step = DMatrix::identity(n, n) + b * dt;
    let mut m = nalgebra::DVector::from_column_slice(x);
    let mut p = DMatrix::zeros(n, n);
    for _ in 0..steps {
        m = &step * m;
        p = &step * p * step.transpose() + a * (2.0 * dt);
    }
    let mut cov = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            cov[r * n + c] = p[(r, c)];
        }
    }
    LinearGaussian { t, mean: m.iter().copied().collect(), cov }
}

/// One compared moment.
#[derive(Clone, Debug, Serialize)]
pub struct MomentRow {
    pub name: String,
    pub sample: f64,
    pub exact: f64,
    pub std_error: f64,
    /// (sample - exact) / std_error
    pub z: f64,
}

/// Sample mean and covariance against a Gaussian, with Gaussian standard
/// errors sqrt(C_ii / N) and sqrt((C_ii C_jj + C_ij^2) / N).
pub fn moment_check(s: &Samples, g: &LinearGaussian) -> Vec<MomentRow> {
    let n = s.dim;
    let count = s.len() as f64;
    let mu = s.mean();
    let c = s.covariance();
    let q = &g.cov;
    let mut rows = Vec::new();
    for i in 0..n {
        let se = (q[i * n + i] / count).sqrt();
        rows.push(row(format!("mean{}", i + 1), mu[i], g.mean[i], se));
    }
    for i in 0..n {
        for j in i..n {
            let se = ((q[i * n + i] * q[j * n + j] + q[i * n + j].powi(2)) / count).sqrt();
            rows.push(row(format!("cov{}{}", i + 1, j + 1), c[i * n + j], q[i * n + j], se));
        }
    }
    rows
}

fn row(name: String, sample: f64, exact: f64, se: f64) -> MomentRow {
    let z = if se > 0.0 { (sample - exact) / se } else if sample == exact { 0.0 } else { f64::INFINITY };
    MomentRow { name, sample, exact, std_error: se, z }
}

/// Relative moment error of the exact EM chain against the exact kernel,
/// per step count, with the log-log slope against dt.
#[derive(Clone, Debug, Serialize)]
pub struct WeakOrder {
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

pub fn weak_order_linear(b: &DMatrix<f64>, a: &DMatrix<f64>, x: &[f64], t: f64, steps: &[usize]) -> Result<WeakOrder> {
    if steps.len() < 2 {
        return Err(Error::Invalid("need at least two step counts".into()));
    }
    let exact = exact_linear_kernel(b, a, t, x)?;
    let errors: Vec<f64> = steps
        .iter()
        .map(|&k| {
            let em = em_moments_linear(b, a, x, t, k);
            let dm = em.mean.iter().zip(&exact.mean).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let dc = em.cov.iter().zip(&exact.cov).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            dm.max(dc)
        })
        .collect();
    let pts: Vec<(f64, f64)> = steps.iter().zip(&errors).map(|(&k, &e)| ((t / k as f64).ln(), e.ln())).collect();
    Ok(WeakOrder { steps: steps.to_vec(), errors, slope: loglog_slope(&pts) })
}

pub(crate) fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// |int f p(t) - f(y)| over a decreasing t ladder.
#[derive(Clone, Debug, Serialize)]
pub struct DeltaReport {
    pub times: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Deviations strictly decrease as t decreases.
    pub monotone: bool,
}

impl DeltaReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.monotone && self.deviations.last().is_some_and(|&d| d <= tol)
    }
}

/// The family is sorted by decreasing t before comparison.
pub fn delta_family_check(family: &[DensityGrid], f: impl Fn(&[f64]) -> f64, y: &[f64]) -> Result<DeltaReport> {
    if family.is_empty() {
        return Err(Error::Invalid("empty density family".into()));
    }
    let mut fam: Vec<&DensityGrid> = family.iter().collect();
    fam.sort_by(|a, b| b.t.total_cmp(&a.t));
    let g0 = &fam[0].grid;
    if fam.iter().any(|g| g.grid.axes.iter().zip(&g0.axes).any(|(a, b)| a.lo != b.lo || a.hi != b.hi)) {
        return Err(Error::Invalid("family members must share the spatial box".into()));
    }
    let fy = f(y);
    let deviations: Vec<f64> = fam.iter().map(|g| (g.integrate(&f) - fy).abs()).collect();
    let monotone = deviations.windows(2).all(|w| w[1] < w[0]) || deviations.len() == 1;
    Ok(DeltaReport { times: fam.iter().map(|g| g.t).collect(), deviations, monotone })
}
