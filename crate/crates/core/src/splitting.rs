//! Characteristic flows, Duhamel solutions, Trotter products and the
//! commutator square walk.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{BoxDomain, Coefficients, VectorFieldSet};
use crate::fields::BracketWord;
use crate::grid::{cubic_weights, DensityGrid, Method, TensorGrid};
use crate::kernels::{partial_frozen_leading, PartialFrozen};

/// Flow of dx/dt = b(x) by classical RK4.
pub struct FlowMap<F> {
    drift: F,
    steps: usize,
    domain: Option<BoxDomain>,
}

impl<F: Fn(&[f64], &mut [f64])> FlowMap<F> {
    pub fn new(drift: F, steps: usize) -> Self {
        FlowMap { drift, steps: steps.max(1), domain: None }
    }

    pub fn within(mut self, d: BoxDomain) -> Self {
        self.domain = Some(d);
        self
    }

    /// F^t x; negative t runs the flow backwards.
    pub fn map(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        let h = t / self.steps as f64;
        let mut z = x.to_vec();
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for step in 0..self.steps {
            (self.drift)(&z, &mut k1);
            for i in 0..n {
                tmp[i] = z[i] + 0.5 * h * k1[i];
            }
            (self.drift)(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = z[i] + 0.5 * h * k2[i];
            }
            (self.drift)(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = z[i] + h * k3[i];
            }
            (self.drift)(&tmp, &mut k4);
            for i in 0..n {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("flow state at step {step}")));
            }
            if let Some(d) = &self.domain {
                if !d.contains(&z) {
                    return Err(Error::BoxExit { t: h * (step + 1) as f64, x: z });
                }
            }
        }
        Ok(z)
    }

    pub fn inverse(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.map(-t, x)
    }
}

/// F^t x with `steps` RK4 steps.
pub fn flow_map<F: Fn(&[f64], &mut [f64])>(drift: F, t: f64, x: &[f64], steps: usize) -> Result<Vec<f64>> {
    FlowMap::new(drift, steps).map(t, x)
}

/// u(t, x) = f(F^t x) + int_0^t g(F^r x) dr, the solution of
/// d_t u = b . grad u + g with u(0) = f.
pub fn flow_solve<F, G, H>(drift: F, f: G, g: H, t: f64, x: &[f64], steps: usize) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]),
    G: Fn(&[f64]) -> f64,
    H: Fn(&[f64]) -> f64,
{
    let n = x.len();
    // augmented state (z, q) with q' = g(z)
    let aug = |s: &[f64], out: &mut [f64]| {
        drift(&s[..n], &mut out[..n]);
        out[n] = g(&s[..n]);
    };
    let mut s0 = x.to_vec();
    s0.push(0.0);
    let end = FlowMap::new(aug, steps).map(t, &s0)?;
    Ok(f(&end[..n]) + end[n])
}

/// Whether trotter_apply treats the input as a function or a density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ApplyMode {
    Function,
    Density,
}

/// Lie-Trotter scheme for d_t u = sum_{i frozen} a_ii(y) d_ii u + W . grad u,
/// W the drift restricted to the non-frozen coordinates.
#[derive(Clone)]
pub struct TrotterScheme {
    pub leading: PartialFrozen,
    coeffs: Arc<dyn Coefficients>,
    pub grid: TensorGrid,
    pub substeps: usize,
    pub flow_steps: usize,
    pub mode: ApplyMode,
}

/// Diagnostics from one application.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrotterStats {
    /// Grid nodes whose departure point left the box.
    pub exits: usize,
    pub substeps: usize,
}

impl TrotterScheme {
    pub fn new(coeffs: Arc<dyn Coefficients>, y: &[f64], frozen: &[usize], grid: TensorGrid) -> Result<Self> {
        if grid.dim() != coeffs.dim() {
            return Err(Error::Invalid("grid dimension does not match the model".into()));
        }
        let leading = partial_frozen_leading(coeffs.as_ref(), y, frozen)?;
        Ok(TrotterScheme { leading, coeffs, grid, substeps: 64, flow_steps: 4, mode: ApplyMode::Function })
    }

    pub fn with_substeps(mut self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("substep count must be >= 1".into()));
        }
        self.substeps = m;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: ApplyMode) -> Self {
        self.mode = mode;
        self
    }

    fn residual_drift(&self, x: &[f64], out: &mut [f64]) {
        self.coeffs.drift(x, out);
        for &i in &self.leading.frozen {
            out[i] = 0.0;
        }
    }

    /// Cubic stencils for the pullback u -> u(F^tau x) at every node.
    fn pullback_stencils(&self, tau: f64) -> Result<(Vec<Vec<(usize, f64)>>, usize)> {
        let g = &self.grid;
        let n = g.dim();
        let bx = BoxDomain { lo: g.axes.iter().map(|a| a.lo).collect(), hi: g.axes.iter().map(|a| a.hi).collect() };
        let res: Vec<Result<(Vec<(usize, f64)>, bool)>> = (0..g.len())
            .into_par_iter()
            .map(|k| {
                let mut x = vec![0.0; n];
                g.point(k, &mut x);
                let z = FlowMap::new(|p: &[f64], o: &mut [f64]| self.residual_drift(p, o), self.flow_steps)
                    .map(tau, &x)?;
                Ok((stencil(g, &z), !bx.contains(&z)))
            })
            .collect();
        let mut out = Vec::with_capacity(g.len());
        let mut exits = 0;
        for r in res {
            let (s, e) = r?;
            exits += e as usize;
            out.push(s);
        }
        Ok((out, exits))
    }

    /// Whether the residual drift has zero divergence at every grid node.
    pub fn divergence_free(&self) -> Result<bool> {
        let n = self.grid.dim();
        let mut x = vec![0.0; n];
        let mut mi = vec![0usize; n];
        for k in 0..self.grid.len() {
            self.grid.multi(k, &mut mi);
            if mi.iter().zip(&self.grid.axes).any(|(&i, a)| i == 0 || i + 1 == a.n) {
                continue;
            }
            self.grid.point(k, &mut x);
            // kink points have no Jacobian; they carry no mass
            let Ok(j) = self.coeffs.drift_jacobian(&x) else { continue };
            let div: f64 = self.leading.residual.iter().map(|&i| j[i * n + i]).sum();
            if div.abs() > 1e-8 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// One-dimensional Gaussian weights for variance 2 lambda tau on axis d.
    fn heat_weights(&self, d: usize, lambda: f64, tau: f64) -> Vec<f64> {
        let h = self.grid.axes[d].h();
        let var = 2.0 * lambda * tau;
        let r = ((8.0 * var.sqrt() / h).ceil() as usize).max(1);
        let mut w: Vec<f64> = (0..=2 * r)
            .map(|k| {
                let z = (k as f64 - r as f64) * h;
                (-z * z / (2.0 * var)).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

/// 4^n cubic Lagrange stencil at z with constant extension.
fn stencil(g: &TensorGrid, z: &[f64]) -> Vec<(usize, f64)> {
    let n = g.dim();
    let mut base = vec![0isize; n];
    let mut cw = vec![[0.0; 4]; n];
    for d in 0..n {
        let ax = &g.axes[d];
        let u = ((z[d] - ax.lo) / ax.h()).clamp(0.0, (ax.n - 1) as f64);
        let i = (u.floor() as usize).min(ax.n - 2);
        base[d] = i as isize - 1;
        cw[d] = cubic_weights(u - i as f64);
    }
    let mut out = Vec::with_capacity(4usize.pow(n as u32));
    for c in 0..4usize.pow(n as u32) {
        let mut r = c;
        let mut flat = 0usize;
        let mut w = 1.0;
        for d in 0..n {
            let off = r % 4;
            r /= 4;
            let idx = (base[d] + off as isize).clamp(0, g.axes[d].n as isize - 1) as usize;
            flat += idx * g.stride(d);
            w *= cw[d][off];
        }
        out.push((flat, w));
    }
    out
}

/// Interpolated values clamped to the stencil's range so that nonnegative
/// input stays nonnegative.
fn pull(values: &[f64], st: &[(usize, f64)]) -> f64 {
    let mut acc = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(k, w) in st {
        let v = values[k];
        acc += w * v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    acc.clamp(lo, hi)
}

fn convolve_axis(g: &TensorGrid, values: &[f64], d: usize, w: &[f64]) -> Vec<f64> {
    let r = (w.len() / 2) as isize;
    let stride = g.stride(d);
    let nd = g.axes[d].n as isize;
    (0..g.len())
        .into_par_iter()
        .map(|k| {
            let i = ((k / stride) % nd as usize) as isize;
            let base = k - i as usize * stride;
            let mut acc = 0.0;
            for (o, wk) in w.iter().enumerate() {
                let j = (i + o as isize - r).clamp(0, nd - 1) as usize;
                acc += wk * values[base + j * stride];
            }
            acc
        })
        .collect()
}

/// (exp(tau A) F_tau)^m f with tau = t/m.
pub fn trotter_apply(scheme: &TrotterScheme, f: &[f64], t: f64) -> Result<(Vec<f64>, TrotterStats)> {
    if f.len() != scheme.grid.len() {
        return Err(Error::Invalid("function is not on the scheme grid".into()));
    }
    if !(t > 0.0) {
        return Err(Error::BadTime { t, s: 0.0 });
    }
    let m = scheme.substeps;
    let tau = t / m as f64;
    let (stencils, exits) = scheme.pullback_stencils(tau)?;
    let heat: Vec<(usize, Vec<f64>)> = scheme
        .leading
        .frozen
        .iter()
        .zip(&scheme.leading.lambda)
        .map(|(&d, &l)| (d, scheme.heat_weights(d, l, tau)))
        .collect();
    // In density mode a divergence-free flow keeps the discrete mass fixed;
    // the interpolation defect is removed by rescaling after each pullback.
    let conserve = scheme.mode == ApplyMode::Density && scheme.divergence_free()?;
    let w = scheme.grid.weights();
    let mass = |u: &[f64]| u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut u = f.to_vec();
    for _ in 0..m {
        let before = if conserve { mass(&u) } else { 0.0 };
        u = stencils.par_iter().map(|st| pull(&u, st)).collect();
        if conserve {
            let after = mass(&u);
            if after > 0.0 {
                let c = before / after;
                u.iter_mut().for_each(|v| *v *= c);
            }
        }
        for (d, w) in &heat {
            u = convolve_axis(&scheme.grid, &u, *d, w);
        }
    }
    if let Some(v) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Trotter value {v}")));
    }
    Ok((u, TrotterStats { exits, substeps: m }))
}

/// Gaussian of one cell width at y with unit grid mass.
pub fn discrete_delta(grid: &TensorGrid, y: &[f64]) -> Vec<f64> {
    let n = grid.dim();
    let mut x = vec![0.0; n];
    let mut v: Vec<f64> = (0..grid.len())
        .map(|k| {
            grid.point(k, &mut x);
            let q: f64 = (0..n).map(|d| ((x[d] - y[d]) / grid.axes[d].h()).powi(2)).sum();
            (-0.5 * q).exp()
        })
        .collect();
    let w = grid.weights();
    let mass: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    if mass > 0.0 {
        v.iter_mut().for_each(|p| *p /= mass);
    }
    v
}

/// Max |second difference| / h^2 along each axis.
pub fn second_difference_max(g: &DensityGrid) -> Vec<f64> {
    let grid = &g.grid;
    let mut mi = vec![0usize; grid.dim()];
    (0..grid.dim())
        .map(|d| {
            let s = grid.stride(d);
            let h = grid.axes[d].h();
            let mut best = 0.0f64;
            for k in 0..grid.len() {
                grid.multi(k, &mut mi);
                if mi[d] == 0 || mi[d] + 1 == grid.axes[d].n {
                    continue;
                }
                let v = (g.values[k + s] - 2.0 * g.values[k] + g.values[k - s]) / (h * h);
                best = best.max(v.abs());
            }
            best
        })
        .collect()
}

/// Trotter product applied to a discrete delta at the scheme's y.
pub fn trotter_density(scheme: &TrotterScheme, model: &str, t: f64) -> Result<DensityGrid> {
    let delta = discrete_delta(&scheme.grid, &scheme.leading.y);
    let (values, stats) = trotter_apply(&scheme.clone().with_mode(ApplyMode::Density), &delta, t)?;
    let mut g = DensityGrid::new(
        Method::Trotter { m: scheme.substeps },
        model,
        &scheme.leading.y,
        t,
        scheme.grid.clone(),
        values,
    );
    let sd = second_difference_max(&g);
    g.meta.insert("mass".into(), serde_json::json!(g.mass()));
    g.meta.insert("min_value".into(), serde_json::json!(g.min()));
    g.meta.insert("exits".into(), serde_json::json!(stats.exits));
    g.meta.insert("frozen".into(), serde_json::json!(scheme.leading.frozen));
    g.meta.insert("second_difference_max".into(), serde_json::json!(sd));
    Ok(g)
}

/// Endpoint and normalized displacement of one square walk.
#[derive(Clone, Debug, Serialize)]
pub struct WalkResult {
    pub delta: f64,
    pub endpoint: Vec<f64>,
    pub estimate: Vec<f64>,
}

/// Follow +V_j, +V_i, -V_j, -V_i for parameter delta each; the displacement
/// over delta^2 approximates [V_j, V_i](x).
pub fn square_walk(fields: &VectorFieldSet, i: usize, j: usize, x: &[f64], delta: f64, steps: usize) -> Result<WalkResult> {
    for k in [i, j] {
        if k >= fields.count() {
            return Err(Error::UnknownIndex { index: k, count: fields.count() });
        }
    }
    if !(delta > 0.0) {
        return Err(Error::Invalid("delta must be positive".into()));
    }
    let leg = |k: usize, sign: f64, z: &[f64]| {
        FlowMap::new(|p: &[f64], o: &mut [f64]| fields.eval_into(k, p, o), steps)
            .within(fields.domain().clone())
            .map(sign * delta, z)
    };
    let mut z = x.to_vec();
    for (k, sign) in [(j, 1.0), (i, 1.0), (j, -1.0), (i, -1.0)] {
        z = leg(k, sign, &z)?;
    }
    let estimate = z.iter().zip(x).map(|(a, b)| (a - b) / (delta * delta)).collect();
    Ok(WalkResult { delta, endpoint: z, estimate })
}

/// One row of a walk study.
#[derive(Clone, Debug, Serialize)]
pub struct WalkRow {
    pub delta: f64,
    pub estimate: Vec<f64>,
    pub bracket: Vec<f64>,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkStudy {
    pub rows: Vec<WalkRow>,
    /// Least-squares log-log slope of error against delta; None when every
    /// error is at roundoff level (the walk is exact, as for step-2
    /// nilpotent fields).
    pub slope: Option<f64>,
}

/// A row counts as roundoff when its error is below
/// WALK_ROUNDOFF * eps * (1 + |x|_inf) / delta^2, the size of cancellation
/// noise in the normalized displacement.
pub const WALK_ROUNDOFF: f64 = 1e3;

/// Roundoff threshold for one walk row.
pub fn walk_noise_floor(x: &[f64], delta: f64) -> f64 {
    let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    WALK_ROUNDOFF * f64::EPSILON * scale / (delta * delta)
}

pub fn walk_study(fields: &VectorFieldSet, i: usize, j: usize, x: &[f64], deltas: &[f64], steps: usize) -> Result<WalkStudy> {
    let bracket = fields.lie_bracket(&BracketWord::leaf(j), &BracketWord::leaf(i), x)?;
    let mut rows = Vec::new();
    for &d in deltas {
        let w = square_walk(fields, i, j, x, d, steps)?;
        let error = w.estimate.iter().zip(&bracket).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        rows.push(WalkRow { delta: d, estimate: w.estimate, bracket: bracket.clone(), error });
    }
    let slope = if rows.iter().all(|r| r.error <= walk_noise_floor(x, r.delta)) {
        None
    } else {
        let pts: Vec<(f64, f64)> =
            rows.iter().map(|r| (r.delta.ln(), r.error.max(f64::MIN_POSITIVE).ln())).collect();
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    };
    Ok(WalkStudy { rows, slope })
}
