//! Levi parametrix: residual kernel, Volterra terms and the density series.
//!
//! With L = d_t - sum a_ij(x) d_ij - V_0 . grad and the frozen Gaussian N_0,
//! the correction kernel is K = -L N_0 and the density is
//! p = N_0 + N_0 * phi with phi = sum_m K_m, K_1 = K, K_{m+1} = K * K_m,
//! where * is the space-time convolution over (s, t) x Omega.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{BoxDomain, Coefficients};
use crate::grid::{cubic_weights, DensityGrid, Method, TensorGrid};
use crate::kernels::EPS_LAMBDA;
use crate::quad;

pub use crate::grid::DensityGrid as Density;

const MAX_DIM: usize = 8;

/// Quadrature knobs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadConfig {
    /// Gauss-Legendre panels per half interval.
    pub panels: usize,
    /// Points per panel.
    pub gauss: usize,
    /// Spatial half-width in standard units.
    pub width: f64,
    /// Spatial nodes per axis (odd).
    pub nodes: usize,
}

impl QuadConfig {
    pub fn for_dim(n: usize) -> Self {
        let nodes = match n {
            1 => 49,
            2 => 17,
            _ => 9,
        };
        QuadConfig { panels: 4, gauss: 4, width: 7.0, nodes }
    }

    /// Twice the nodes in time and space.
    pub fn refined(&self) -> Self {
        QuadConfig { panels: 2 * self.panels, gauss: self.gauss, width: self.width, nodes: 2 * self.nodes - 1 }
    }

    fn validate(&self) -> Result<()> {
        if self.panels == 0 || self.gauss == 0 || self.nodes < 3 || self.nodes % 2 == 0 || !(self.width > 0.0) {
            return Err(Error::Invalid("quadrature needs panels, gauss >= 1, odd nodes >= 3, width > 0".into()));
        }
        Ok(())
    }
}

/// Coefficient data at one point.
#[derive(Clone, Debug)]
pub struct PointData {
    pub x: Vec<f64>,
    a: Vec<f64>,
    v0: Vec<f64>,
    inv: Vec<f64>,
    /// (4 pi)^{-n/2} det(a)^{-1/2}
    nc: f64,
    ok: bool,
}

fn small_inverse(a: &[f64], n: usize) -> Option<(Vec<f64>, f64)> {
    let tr: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let (inv, det) = match n {
        1 => {
            let d = a[0];
            (vec![1.0 / d], d)
        }
        2 => {
            let d = a[0] * a[3] - a[1] * a[2];
            (vec![a[3] / d, -a[1] / d, -a[2] / d, a[0] / d], d)
        }
        _ => {
            let m = nalgebra::DMatrix::from_row_slice(n, n, a);
            let d = m.determinant();
            let inv = m.try_inverse()?;
            let mut v = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    v[r * n + c] = inv[(r, c)];
                }
            }
            (v, d)
        }
    };
    let scale = (tr / n as f64).powi(n as i32);
    if !(tr > 0.0) || !(det > EPS_LAMBDA * scale) || !det.is_finite() {
        return None;
    }
    Some((inv, det))
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Time nodes on (s, t), split at the midpoint, graded toward both ends by
/// sigma = s + u^2 on the first half and sigma = t - v^2 on the second.
#[derive(Clone, Debug, Serialize)]
pub struct SpaceTimeGrid {
    pub s: f64,
    pub t: f64,
    pub times: Vec<f64>,
    pub time_weights: Vec<f64>,
    /// Index of the first second-half node.
    pub split: usize,
    /// Standard spatial nodes on [-width, width] and trapezoid weights.
    pub w_axis: Vec<f64>,
    pub w_weights: Vec<f64>,
    pub dim: usize,
}

impl SpaceTimeGrid {
    pub fn new(s: f64, t: f64, dim: usize, cfg: &QuadConfig) -> Result<Self> {
        if t <= s {
            return Err(Error::BadTime { t, s });
        }
        cfg.validate()?;
        let mid = 0.5 * (s + t);
        let (u, wu) = quad::composite(0.0, (mid - s).sqrt(), cfg.panels, cfg.gauss);
        let mut times = Vec::with_capacity(2 * u.len());
        let mut tw = Vec::with_capacity(2 * u.len());
        for (ui, wi) in u.iter().zip(&wu) {
            times.push(s + ui * ui);
            tw.push(2.0 * ui * wi);
        }
        let split = times.len();
        let (v, wv) = quad::composite(0.0, (t - mid).sqrt(), cfg.panels, cfg.gauss);
        for (vi, wi) in v.iter().zip(&wv).rev() {
            times.push(t - vi * vi);
            tw.push(2.0 * vi * wi);
        }
        let h = 2.0 * cfg.width / (cfg.nodes - 1) as f64;
        let w_axis: Vec<f64> = (0..cfg.nodes).map(|k| -cfg.width + h * k as f64).collect();
        let w_weights: Vec<f64> =
            (0..cfg.nodes).map(|k| if k == 0 || k + 1 == cfg.nodes { 0.5 * h } else { h }).collect();
        Ok(SpaceTimeGrid { s, t, times, time_weights: tw, split, w_axis, w_weights, dim })
    }

    pub fn spatial_count(&self) -> usize {
        self.w_axis.len().pow(self.dim as u32)
    }

    /// Standard node j and its tensor weight.
    fn w_node(&self, mut j: usize, out: &mut [f64]) -> f64 {
        let k = self.w_axis.len();
        let mut wt = 1.0;
        for d in (0..self.dim).rev() {
            out[d] = self.w_axis[j % k];
            wt *= self.w_weights[j % k];
            j /= k;
        }
        wt
    }
}

/// Parametrix construction for one model, start point y and start time s.
pub struct Parametrix {
    coeffs: Arc<dyn Coefficients>,
    n: usize,
    y: PointData,
    chol_y: Vec<f64>,
    det_chol_y: f64,
    s: f64,
    cfg: QuadConfig,
    domain: BoxDomain,
}

/// One Volterra term, evaluated on demand.
pub trait Term: Sync {
    /// Index m of K_m.
    fn index(&self) -> usize;
    /// K_m(tau, x; s, y).
    fn eval(&self, tau: f64, x: &PointData) -> f64;
}

struct Leading<'a> {
    p: &'a Parametrix,
}

impl Term for Leading<'_> {
    fn index(&self) -> usize {
        1
    }
    fn eval(&self, tau: f64, x: &PointData) -> f64 {
        self.p.k1(tau, x, self.p.s, &self.p.y)
    }
}

/// K_{m+1} = K * K_m.
pub struct Volterra<'a> {
    p: &'a Parametrix,
    prev: Box<dyn Term + 'a>,
}

impl Term for Volterra<'_> {
    fn index(&self) -> usize {
        self.prev.index() + 1
    }
    fn eval(&self, tau: f64, x: &PointData) -> f64 {
        self.p.convolve(tau, x, |sigma, xi| self.prev.eval(sigma, xi))
    }
}

/// Densities plus the diagnostics recorded alongside them.
#[derive(Clone, Debug, Serialize)]
pub struct SeriesReport {
    /// sup |K_m| over table nodes with sigma >= s + (t - s)/4, m = 1..=M.
    pub term_norms: Vec<f64>,
    pub quadrature: QuadConfig,
}

impl Parametrix {
    pub fn new(coeffs: Arc<dyn Coefficients>, y: &[f64], s: f64) -> Result<Self> {
        let n = coeffs.dim();
        if n > MAX_DIM || y.len() != n {
            return Err(Error::Invalid(format!("parametrix supports 1..={MAX_DIM} dimensions")));
        }
        let mut p = Parametrix {
            coeffs,
            n,
            y: PointData { x: vec![], a: vec![], v0: vec![], inv: vec![], nc: 0.0, ok: false },
            chol_y: vec![],
            det_chol_y: 0.0,
            s,
            cfg: QuadConfig::for_dim(n),
            domain: BoxDomain::cube(n, f64::NEG_INFINITY, f64::INFINITY),
        };
        p.y = p.point(y);
        if !p.y.ok {
            return Err(Error::Invalid(format!("a(y) is degenerate at y = {y:?}")));
        }
        p.chol_y = cholesky(&p.y.a, n).ok_or_else(|| Error::Invalid("a(y) is not positive definite".into()))?;
        p.det_chol_y = (0..n).map(|i| p.chol_y[i * n + i]).product();
        Ok(p)
    }

    pub fn with_config(mut self, cfg: QuadConfig) -> Result<Self> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(self)
    }

    /// Restrict all space integrals to the box.
    pub fn with_domain(mut self, d: BoxDomain) -> Result<Self> {
        if d.dim() != self.n {
            return Err(Error::Invalid("domain dimension mismatch".into()));
        }
        self.domain = d;
        Ok(self)
    }

    pub fn config(&self) -> &QuadConfig {
        &self.cfg
    }

    pub fn point(&self, x: &[f64]) -> PointData {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        let mut v0 = vec![0.0; n];
        self.coeffs.diffusion(x, &mut a);
        self.coeffs.drift(x, &mut v0);
        match small_inverse(&a, n) {
            Some((inv, det)) => {
                let nc = (4.0 * PI).powf(-(n as f64) / 2.0) / det.sqrt();
                PointData { x: x.to_vec(), a, v0, inv, nc, ok: true }
            }
            None => PointData { x: x.to_vec(), a, v0, inv: vec![0.0; n * n], nc: 0.0, ok: false },
        }
    }

    /// N_0(t, x; sigma, xi) frozen at xi.
    fn n0(&self, t: f64, x: &[f64], sigma: f64, xi: &PointData) -> f64 {
        if !xi.ok {
            return 0.0;
        }
        let n = self.n;
        let dt = t - sigma;
        let mut z = [0.0; MAX_DIM];
        for i in 0..n {
            z[i] = x[i] - xi.x[i];
        }
        let mut q = 0.0;
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += xi.inv[r * n + c] * z[c];
            }
            q += z[r] * acc;
        }
        xi.nc * dt.powf(-(n as f64) / 2.0) * (-q / (4.0 * dt)).exp()
    }

    /// K(t, x; sigma, xi) = -(L N_0)(t, x; sigma, xi).
    fn k1(&self, t: f64, x: &PointData, sigma: f64, xi: &PointData) -> f64 {
        if !xi.ok {
            return 0.0;
        }
        let n = self.n;
        let dt = t - sigma;
        let mut z = [0.0; MAX_DIM];
        let mut az = [0.0; MAX_DIM];
        for i in 0..n {
            z[i] = x.x[i] - xi.x[i];
        }
        let mut q = 0.0;
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += xi.inv[r * n + c] * z[c];
            }
            az[r] = acc;
            q += z[r] * acc;
        }
        let nval = xi.nc * dt.powf(-(n as f64) / 2.0) * (-q / (4.0 * dt)).exp();
        if nval == 0.0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let da = x.a[i * n + j] - xi.a[i * n + j];
                if da != 0.0 {
                    sum += da * (az[i] * az[j] / (4.0 * dt * dt) - xi.inv[i * n + j] / (2.0 * dt));
                }
            }
            sum -= x.v0[i] * az[i] / (2.0 * dt);
        }
        nval * sum
    }

    /// Residual L N_0 = sum (a(y) - a(x)) d_ij N_0 + sum b_j d_j N_0
    /// with b = -V_0.
    pub fn residual_kernel(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<f64> {
        if t <= s {
            return Err(Error::BadTime { t, s });
        }
        Ok(-self.k1(t, &self.point(x), s, &self.point(y)))
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        self.domain.contains(x)
    }

    /// int_s^tau int K(tau, x; sigma, xi) f(sigma, xi) dxi dsigma.
    fn convolve(&self, tau: f64, x: &PointData, f: impl Fn(f64, &PointData) -> f64) -> f64 {
        let n = self.n;
        let stg = match SpaceTimeGrid::new(self.s, tau, n, &self.cfg) {
            Ok(g) => g,
            Err(_) => return 0.0,
        };
        let chol_x = if x.ok { cholesky(&x.a, n) } else { None };
        let (chol_x, det_x) = match chol_x {
            Some(l) => {
                let d = (0..n).map(|i| l[i * n + i]).product();
                (l, d)
            }
            None => (self.chol_y.clone(), self.det_chol_y),
        };
        let mut w = [0.0; MAX_DIM];
        let mut xi = vec![0.0; n];
        let mut total = 0.0;
        for (l, (&sigma, &tw)) in stg.times.iter().zip(&stg.time_weights).enumerate() {
            let first = l < stg.split;
            let (center, chol, detl, lag) = if first {
                (&self.y.x, &self.chol_y, self.det_chol_y, sigma - self.s)
            } else {
                (&x.x, &chol_x, det_x, tau - sigma)
            };
            let sc = (2.0 * lag).sqrt();
            let jac = sc.powi(n as i32) * detl * tw;
            for j in 0..stg.spatial_count() {
                let ww = stg.w_node(j, &mut w);
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += chol[r * n + c] * w[c];
                    }
                    xi[r] = center[r] + sc * acc;
                }
                if !self.in_domain(&xi) {
                    continue;
                }
                let pd = self.point(&xi);
                if !pd.ok {
                    continue;
                }
                let k = self.k1(tau, x, sigma, &pd);
                if k == 0.0 {
                    continue;
                }
                total += jac * ww * k * f(sigma, &pd);
            }
        }
        total
    }

    /// K_1 as a term object.
    pub fn leading(&self) -> Box<dyn Term + '_> {
        Box::new(Leading { p: self })
    }

    /// K_{m+1} from K_m.
    pub fn volterra_step<'a>(&'a self, prev: Box<dyn Term + 'a>) -> Box<dyn Term + 'a> {
        Box::new(Volterra { p: self, prev })
    }

    /// K_m(tau, x; s, y).
    pub fn term(&self, m: usize, tau: f64, x: &[f64]) -> Result<f64> {
        if m == 0 {
            return Err(Error::Invalid("terms are indexed from 1".into()));
        }
        if tau <= self.s {
            return Err(Error::BadTime { t: tau, s: self.s });
        }
        let mut t = self.leading();
        for _ in 1..m {
            t = self.volterra_step(t);
        }
        Ok(t.eval(tau, &self.point(x)))
    }

    /// p_M(t, x) at the given points.
    pub fn density_at(&self, t: f64, order: usize, xs: &[Vec<f64>]) -> Result<(Vec<f64>, SeriesReport)> {
        let n = self.n;
        let stg = SpaceTimeGrid::new(self.s, t, n, &self.cfg)?;
        let ns = stg.spatial_count();
        // table nodes, y-centered at every time node
        let mut nodes: Vec<(usize, PointData, f64)> = Vec::with_capacity(stg.times.len() * ns);
        let mut w = [0.0; MAX_DIM];
        let mut xi = vec![0.0; n];
        for (l, (&sigma, &tw)) in stg.times.iter().zip(&stg.time_weights).enumerate() {
            let sc = (2.0 * (sigma - self.s)).sqrt();
            let jac = sc.powi(n as i32) * self.det_chol_y * tw;
            for j in 0..ns {
                let ww = stg.w_node(j, &mut w);
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += self.chol_y[r * n + c] * w[c];
                    }
                    xi[r] = self.y.x[r] + sc * acc;
                }
                nodes.push((l, self.point(&xi), jac * ww));
            }
        }
        // K_1 at table nodes
        let k1: Vec<f64> = nodes.iter().map(|(l, pd, _)| self.k1(stg.times[*l], pd, self.s, &self.y)).collect();
        // higher terms at table nodes
        let mut higher: Vec<Vec<f64>> = Vec::new();
        if order >= 2 {
            let mut term = self.leading();
            for _ in 2..=order {
                term = self.volterra_step(term);
                let tref = &term;
                let vals: Vec<f64> = nodes
                    .par_iter()
                    .map(|(l, pd, _)| {
                        if !self.in_domain(&pd.x) || !pd.ok {
                            0.0
                        } else {
                            tref.eval(stg.times[*l], pd)
                        }
                    })
                    .collect();
                if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("Volterra term value {v}")));
                }
                higher.push(vals);
            }
        }
        let quarter = self.s + 0.25 * (t - self.s);
        let norm = |v: &[f64]| {
            nodes
                .iter()
                .zip(v)
                .filter(|((l, _, _), _)| stg.times[*l] >= quarter)
                .fold(0.0f64, |m, (_, x)| m.max(x.abs()))
        };
        let mut term_norms = Vec::new();
        if order >= 1 {
            term_norms.push(norm(&k1));
        }
        for h in &higher {
            term_norms.push(norm(h));
        }
        if term_norms.len() >= 2 {
            let k = term_norms.len();
            if term_norms[k - 1] >= term_norms[k - 2] && term_norms[k - 1] > 0.0 {
                return Err(Error::Divergence(term_norms));
            }
        }
        let report = SeriesReport { term_norms, quadrature: self.cfg.clone() };

        let lead = if let Ok(fg) = crate::kernels::frozen_gaussian_from(
            &nalgebra::DMatrix::from_row_slice(n, n, &self.y.a),
            &self.y.x,
        ) {
            fg
        } else {
            return Err(Error::Invalid("a(y) is degenerate".into()));
        };
        let values: Vec<f64> = xs
            .par_iter()
            .map(|x| {
                let mut p = lead.value(t, x, self.s).unwrap_or(0.0);
                if order == 0 {
                    return p;
                }
                let xd = self.point(x);
                // first half: table nodes
                for (k, (l, pd, wt)) in nodes.iter().enumerate() {
                    if *l >= stg.split {
                        break;
                    }
                    if !pd.ok || !self.in_domain(&pd.x) {
                        continue;
                    }
                    let mut phi = k1[k];
                    for h in &higher {
                        phi += h[k];
                    }
                    p += wt * self.n0(t, x, stg.times[*l], pd) * phi;
                }
                // second half: x-centered nodes, higher terms interpolated
                let (chol_x, det_x) = match cholesky(&xd.a, n) {
                    Some(l) => {
                        let d: f64 = (0..n).map(|i| l[i * n + i]).product();
                        (l, d)
                    }
                    None => (self.chol_y.clone(), self.det_chol_y),
                };
                let mut w = [0.0; MAX_DIM];
                let mut xi = vec![0.0; n];
                for l in stg.split..stg.times.len() {
                    let sigma = stg.times[l];
                    let sc = (2.0 * (t - sigma)).sqrt();
                    let jac = sc.powi(n as i32) * det_x * stg.time_weights[l];
                    for j in 0..ns {
                        let ww = stg.w_node(j, &mut w);
                        for r in 0..n {
                            let mut acc = 0.0;
                            for c in 0..=r {
                                acc += chol_x[r * n + c] * w[c];
                            }
                            xi[r] = x[r] + sc * acc;
                        }
                        if !self.in_domain(&xi) {
                            continue;
                        }
                        let pd = self.point(&xi);
                        if !pd.ok {
                            continue;
                        }
                        let mut phi = self.k1(sigma, &pd, self.s, &self.y);
                        for h in &higher {
                            phi += self.interpolate_table(&stg, l, &h[l * ns..(l + 1) * ns], &xi);
                        }
                        p += jac * ww * self.n0(t, x, sigma, &pd) * phi;
                    }
                }
                p
            })
            .collect();
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("density value {v}")));
        }
        Ok((values, report))
    }

    /// sup over `xs` of the FD residual |d_t p_M - a d^2 p_M - V_0 . grad p_M|
    /// using the same fourth-order stencils as [`pde_residual`], batched so
    /// each time level is built once.
    pub fn residual_norm(&self, t: f64, order: usize, xs: &[Vec<f64>], h: f64, ht: f64) -> Result<f64> {
        let n = self.n;
        if t - 2.0 * ht <= self.s {
            return Err(Error::Invalid("time stencil reaches the start time".into()));
        }
        // spatial stencil points for every x: centre, +-h, +-2h per axis, and
        // +-h corners per axis pair
        let mut pts: Vec<Vec<f64>> = Vec::new();
        for x in xs {
            pts.push(x.clone());
            for i in 0..n {
                for d in [-2.0, -1.0, 1.0, 2.0] {
                    let mut z = x.clone();
                    z[i] += d * h;
                    pts.push(z);
                }
                for j in 0..n {
                    if j != i {
                        for (di, dj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                            let mut z = x.clone();
                            z[i] += di * h;
                            z[j] += dj * h;
                            pts.push(z);
                        }
                    }
                }
            }
        }
        let now = self.density_at(t, order, &pts)?.0;
        let lookup: std::collections::HashMap<Vec<u64>, f64> = pts
            .iter()
            .zip(&now)
            .map(|(p, v)| (p.iter().map(|c| c.to_bits()).collect(), *v))
            .collect();
        let mut levels = Vec::new();
        for d in [-2.0, -1.0, 1.0, 2.0] {
            levels.push(self.density_at(t + d * ht, order, xs)?.0);
        }
        let mut worst = 0.0f64;
        for (k, x) in xs.iter().enumerate() {
            let p = |z: &[f64]| lookup[&z.iter().map(|c| c.to_bits()).collect::<Vec<_>>()];
            let dt = (levels[0][k] - 8.0 * levels[1][k] + 8.0 * levels[2][k] - levels[3][k]) / (12.0 * ht);
            let spatial = {
                let mut a = vec![0.0; n * n];
                let mut v0 = vec![0.0; n];
                self.coeffs.diffusion(x, &mut a);
                self.coeffs.drift(x, &mut v0);
                let shift = |i: usize, d: f64| {
                    let mut z = x.clone();
                    z[i] += d;
                    z
                };
                let mut s = 0.0;
                for i in 0..n {
                    let f = |d: f64| p(&shift(i, d));
                    let d1 = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
                    let d2 = (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h) - f(2.0 * h)) / (12.0 * h * h);
                    s += a[i * n + i] * d2 + v0[i] * d1;
                    for j in 0..n {
                        if i != j && a[i * n + j] != 0.0 {
                            let c = |di: f64, dj: f64| {
                                let mut z = x.clone();
                                z[i] += di;
                                z[j] += dj;
                                p(&z)
                            };
                            s += a[i * n + j] * (c(h, h) - c(h, -h) - c(-h, h) + c(-h, -h)) / (4.0 * h * h);
                        }
                    }
                }
                s
            };
            worst = worst.max((dt - spatial).abs());
        }
        Ok(worst)
    }

    /// Cubic interpolation of a y-centered table slice at time node l; zero outside.
    fn interpolate_table(&self, stg: &SpaceTimeGrid, l: usize, vals: &[f64], xi: &[f64]) -> f64 {
        let n = self.n;
        let sc = (2.0 * (stg.times[l] - self.s)).sqrt();
        // solve L w = (xi - y) / sc
        let mut w = [0.0; MAX_DIM];
        for r in 0..n {
            let mut acc = (xi[r] - self.y.x[r]) / sc;
            for c in 0..r {
                acc -= self.chol_y[r * n + c] * w[c];
            }
            w[r] = acc / self.chol_y[r * n + r];
        }
        let k = stg.w_axis.len();
        let lo = stg.w_axis[0];
        let h = stg.w_axis[1] - stg.w_axis[0];
        let mut base = [0usize; MAX_DIM];
        let mut cw = [[0.0; 4]; MAX_DIM];
        for d in 0..n {
            let u = (w[d] - lo) / h;
            if !(u >= 0.0) || u > (k - 1) as f64 {
                return 0.0;
            }
            let i = (u.floor() as usize).min(k - 2);
            base[d] = i;
            cw[d] = cubic_weights(u - i as f64);
        }
        let mut acc = 0.0;
        for c in 0..4usize.pow(n as u32) {
            let mut r = c;
            let mut flat = 0usize;
            let mut wt = 1.0;
            let mut skip = false;
            for d in 0..n {
                let off = r % 4;
                r /= 4;
                let idx = base[d] as isize + off as isize - 1;
                if idx < 0 || idx >= k as isize {
                    skip = true;
                    break;
                }
                wt *= cw[d][off];
                flat = flat * k + idx as usize;
            }
            if !skip {
                acc += wt * vals[flat];
            }
        }
        acc
    }
}

/// p_M on a tensor grid.
pub fn density_approx(
    coeffs: Arc<dyn Coefficients>,
    model: &str,
    y: &[f64],
    t: f64,
    order: usize,
    grid: &TensorGrid,
    cfg: Option<QuadConfig>,
    domain: Option<BoxDomain>,
) -> Result<DensityGrid> {
    let mut p = Parametrix::new(coeffs, y, 0.0)?;
    if let Some(c) = cfg {
        p = p.with_config(c)?;
    }
    if let Some(d) = domain {
        p = p.with_domain(d)?;
    }
    let xs = grid.points();
    let (values, report) = p.density_at(t, order, &xs)?;
    let mut g = DensityGrid::new(Method::Parametrix { order }, model, y, t, grid.clone(), values);
    g.meta.insert("term_norms".into(), serde_json::json!(report.term_norms));
    g.meta.insert("quadrature".into(), serde_json::to_value(&report.quadrature).unwrap());
    g.meta.insert("mass".into(), serde_json::json!(g.mass()));
    g.meta.insert("min_value".into(), serde_json::json!(g.min()));
    Ok(g)
}

/// sup |d_t p - sum a_ij d_ij p - V_0 . grad p| over the points, with
/// fourth-order central differences in t and in each x_i (second order for
/// mixed derivatives).
pub fn pde_residual(
    coeffs: &dyn Coefficients,
    p: impl Fn(f64, &[f64]) -> f64,
    t: f64,
    x: &[f64],
    h: f64,
    ht: f64,
) -> f64 {
    let n = x.len();
    let mut a = vec![0.0; n * n];
    let mut v0 = vec![0.0; n];
    coeffs.diffusion(x, &mut a);
    coeffs.drift(x, &mut v0);
    let d1 = |f: &dyn Fn(f64) -> f64, h: f64| (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
    let d2 = |f: &dyn Fn(f64) -> f64, h: f64| {
        (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h) - f(2.0 * h)) / (12.0 * h * h)
    };
    let shift = |i: usize, d: f64| {
        let mut z = x.to_vec();
        z[i] += d;
        z
    };
    let mut r = d1(&|d| p(t + d, x), ht);
    for i in 0..n {
        let fi = |d: f64| p(t, &shift(i, d));
        r -= a[i * n + i] * d2(&fi, h);
        r -= v0[i] * d1(&fi, h);
        for j in 0..n {
            if i != j && a[i * n + j] != 0.0 {
                let f = |di: f64, dj: f64| {
                    let mut z = x.to_vec();
                    z[i] += di;
                    z[j] += dj;
                    p(t, &z)
                };
                let m = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                r -= a[i * n + j] * m;
            }
        }
    }
    r
}

/// Convex blend phi1 pA + phi2 pB, rescaled to mass min(mA, mB, 1).
pub fn blend_local_densities(
    pa: &DensityGrid,
    pb: &DensityGrid,
    phi1: impl Fn(&[f64]) -> f64,
    phi2: impl Fn(&[f64]) -> f64,
) -> Result<DensityGrid> {
    let overlap = pa
        .grid
        .axes
        .iter()
        .zip(&pb.grid.axes)
        .all(|(a, b)| a.lo.max(b.lo) < a.hi.min(b.hi));
    if pa.grid.dim() != pb.grid.dim() || !overlap {
        return Err(Error::Invalid("empty overlap between patch grids".into()));
    }
    if pa.grid != pb.grid {
        return Err(Error::Invalid("patch grids must be aligned".into()));
    }
    let mut x = vec![0.0; pa.grid.dim()];
    let mut v = Vec::with_capacity(pa.values.len());
    for k in 0..pa.grid.len() {
        pa.grid.point(k, &mut x);
        let (f1, f2) = (phi1(&x), phi2(&x));
        if f1 < 0.0 || f2 < 0.0 || (f1 + f2 - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("partition of unity fails at {x:?}")));
        }
        v.push(f1 * pa.values[k] + f2 * pb.values[k]);
    }
    let mut out = DensityGrid::new(Method::Blend, &pa.model, &pa.y, pa.t, pa.grid.clone(), v);
    let target = pa.mass().min(pb.mass()).min(1.0);
    let m = out.mass();
    let c = if m > 0.0 { target / m } else { 1.0 };
    out.values.iter_mut().for_each(|v| *v *= c);
    out.meta.insert("normalization".into(), serde_json::json!(c));
    out.meta.insert("patches".into(), serde_json::json!([pa.method.tag(), pb.method.tag()]));
    Ok(out)
}
