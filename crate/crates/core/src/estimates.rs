//! Derivative grids, Gaussian-type envelope fits, coefficient mollification
//! and the density limit check for Lipschitz coefficients.
//!
//! The envelope form is
//! |d_t^j d_x^alpha d_y^beta p| <= A (1 + |x|)^m t^{-n} exp(-B |x - y|^2 / t).

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{BoxDomain, Coefficients};
use crate::grid::{DensityGrid, TensorGrid};
use crate::hoermander::{sample_points, Sampling};
use crate::quad::gauss_legendre;

/// Derivative order (j, alpha, beta).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DerivOrder {
    pub j: usize,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
}

impl DerivOrder {
    pub fn new(j: usize, alpha: Vec<usize>, beta: Vec<usize>) -> Self {
        DerivOrder { j, alpha, beta }
    }

    pub fn zero(n: usize) -> Self {
        DerivOrder { j: 0, alpha: vec![0; n], beta: vec![0; n] }
    }

    /// (j, |alpha|, |beta|)
    pub fn triple(&self) -> (usize, usize, usize) {
        (self.j, self.alpha.iter().sum(), self.beta.iter().sum())
    }

    /// Parse "j;a1,a2;b1,b2" (or "j,|a|,|b|" in one dimension).
    pub fn parse(s: &str, n: usize) -> Result<Self> {
        let bad = || Error::Parse(format!("bad derivative order '{s}'"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(';').collect();
        let o = if parts.len() == 3 {
            let v = |t: &str| t.split(',').map(num).collect::<Result<Vec<_>>>();
            DerivOrder { j: num(parts[0])?, alpha: v(parts[1])?, beta: v(parts[2])? }
        } else if n == 1 {
            let v: Vec<usize> = s.split(',').map(num).collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(bad());
            }
            DerivOrder { j: v[0], alpha: vec![v[1]], beta: vec![v[2]] }
        } else {
            return Err(bad());
        };
        if o.alpha.len() != n || o.beta.len() != n {
            return Err(bad());
        }
        Ok(o)
    }
}

/// Central difference stencil for the k-th derivative: offsets (in steps)
/// and weights, before dividing by h^k.
pub fn central_stencil(k: usize) -> Vec<(isize, f64)> {
    let conv = |a: &[(isize, f64)], b: &[(isize, f64)]| {
        let mut m: BTreeMap<isize, f64> = BTreeMap::new();
        for &(i, u) in a {
            for &(j, v) in b {
                *m.entry(i + j).or_default() += u * v;
            }
        }
        m.into_iter().filter(|(_, w)| *w != 0.0).collect::<Vec<_>>()
    };
    let mut s = vec![(0isize, 1.0)];
    for _ in 0..k / 2 {
        s = conv(&s, &[(-1, 1.0), (0, -2.0), (1, 1.0)]);
    }
    if k % 2 == 1 {
        s = conv(&s, &[(-1, -0.5), (1, 0.5)]);
    }
    s
}

/// Central x-derivative of grid values; the result lives on the grid with
/// the stencil half-width removed from every side.
pub fn x_derivative(g: &DensityGrid, alpha: &[usize]) -> Result<DensityGrid> {
    let grid = &g.grid;
    let n = grid.dim();
    if alpha.len() != n {
        return Err(Error::Invalid("derivative index has the wrong dimension".into()));
    }
    let k = alpha.iter().map(|&a| a.div_ceil(2)).max().unwrap_or(0);
    for (d, &a) in alpha.iter().enumerate() {
        if grid.axes[d].n < a + 2 {
            return Err(Error::Invalid(format!("stencil exceeds grid on axis {d}")));
        }
    }
    let inner = grid.shrink(k)?;
    let stencils: Vec<Vec<(isize, f64)>> = alpha.iter().map(|&a| central_stencil(a)).collect();
    let scale: f64 = alpha.iter().enumerate().map(|(d, &a)| grid.axes[d].h().powi(a as i32)).product();
    let values: Vec<f64> = (0..inner.len())
        .into_par_iter()
        .map(|q| {
            let mut mi = vec![0usize; n];
            inner.multi(q, &mut mi);
            let mut acc = 0.0;
            let mut combo = vec![0usize; n];
            loop {
                let mut flat = 0usize;
                let mut w = 1.0;
                for d in 0..n {
                    let (o, wt) = stencils[d][combo[d]];
                    flat += (mi[d] as isize + k as isize + o) as usize * grid.stride(d);
                    w *= wt;
                }
                acc += w * g.values[flat];
                let mut d = 0;
                while d < n {
                    combo[d] += 1;
                    if combo[d] < stencils[d].len() {
                        break;
                    }
                    combo[d] = 0;
                    d += 1;
                }
                if d == n {
                    break;
                }
            }
            acc / scale
        })
        .collect();
    let mut out = DensityGrid::new(g.method.clone(), &g.model, &g.y, g.t, inner, values);
    out.s = g.s;
    out.meta = g.meta.clone();
    Ok(out)
}

/// Produces densities p(t, . ; y) on one fixed grid.
pub trait DensitySource: Sync {
    fn density(&self, t: f64, y: &[f64]) -> Result<DensityGrid>;
}

impl<F> DensitySource for F
where
    F: Fn(f64, &[f64]) -> Result<DensityGrid> + Sync,
{
    fn density(&self, t: f64, y: &[f64]) -> Result<DensityGrid> {
        self(t, y)
    }
}

/// Finite-difference steps in t and y.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FdSteps {
    pub ht: f64,
    pub hy: f64,
}

/// d_t^j d_x^alpha d_y^beta p(t, . ; y) by central differences.
pub fn derivative_grid(src: &dyn DensitySource, t: f64, y: &[f64], order: &DerivOrder, steps: FdSteps) -> Result<DensityGrid> {
    let n = y.len();
    if order.alpha.len() != n || order.beta.len() != n {
        return Err(Error::Invalid("derivative index has the wrong dimension".into()));
    }
    let ts = central_stencil(order.j);
    let max_t = ts.iter().map(|p| p.0.unsigned_abs()).max().unwrap_or(0) as f64 * steps.ht;
    if order.j > 0 && max_t >= t {
        return Err(Error::Invalid("time stencil reaches t = 0".into()));
    }
    // (time offset, y offset, weight)
    let mut combos: Vec<(f64, Vec<f64>, f64)> = ts
        .iter()
        .map(|&(o, w)| (o as f64 * steps.ht, y.to_vec(), w / steps.ht.powi(order.j as i32)))
        .collect();
    for (d, &b) in order.beta.iter().enumerate() {
        if b == 0 {
            continue;
        }
        let st = central_stencil(b);
        let mut next = Vec::new();
        for (dt, yy, w) in &combos {
            for &(o, sw) in &st {
                let mut y2 = yy.clone();
                y2[d] += o as f64 * steps.hy;
                next.push((*dt, y2, w * sw / steps.hy.powi(b as i32)));
            }
        }
        combos = next;
    }
    let grids = combos
        .iter()
        .map(|(dt, yy, _)| src.density(t + dt, yy))
        .collect::<Result<Vec<_>>>()?;
    let g0 = &grids[0];
    if grids.iter().any(|g| g.grid != g0.grid) {
        return Err(Error::Invalid("density source changed the grid".into()));
    }
    let mut values = vec![0.0; g0.values.len()];
    for (g, (_, _, w)) in grids.iter().zip(&combos) {
        for (v, p) in values.iter_mut().zip(&g.values) {
            *v += w * p;
        }
    }
    let mut combined = DensityGrid::new(g0.method.clone(), &g0.model, y, t, g0.grid.clone(), values);
    combined.meta.insert("derivative".into(), serde_json::json!(order));
    x_derivative(&combined, &order.alpha)
}

/// Fitted constants at one time level.
#[derive(Clone, Debug, Serialize)]
pub struct LevelFit {
    pub t: f64,
    pub a: f64,
    /// Largest B keeping the level dominated with the global A, n, m.
    pub b: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeFit {
    pub order: DerivOrder,
    pub a: f64,
    pub b: f64,
    pub n_fit: f64,
    pub m_fit: f64,
    pub n_int: i64,
    pub m_int: i64,
    /// min over samples of bound - |value|.
    pub margin: f64,
    pub violations: usize,
    pub samples: usize,
    pub levels: Vec<LevelFit>,
    pub a_nondecreasing: bool,
    /// Integrated slack of the chosen envelope.
    pub slack: f64,
}

impl EnvelopeFit {
    pub fn passes(&self) -> bool {
        self.violations == 0 && self.margin >= 0.0 && self.a_nondecreasing && self.a.is_finite()
    }

    pub fn bound(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        shape(self.n_fit, self.m_fit, self.b, t, x, y) * self.a
    }
}

fn shape(n: f64, m: f64, b: f64, t: f64, x: &[f64], y: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, c)| (a - c).powi(2)).sum();
    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (1.0 + nx).powf(m) * t.powf(-n) * (-b * r2 / t).exp()
}

/// Lattice for (B, n, m).
#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeLattice {
    pub b: Vec<f64>,
    pub n: Vec<f64>,
    pub m: Vec<f64>,
}

impl Default for EnvelopeLattice {
    fn default() -> Self {
        EnvelopeLattice {
            b: (1..=40).map(|k| 0.05 * k as f64).collect(),
            n: (0..=16).map(|k| 0.25 * k as f64).collect(),
            m: (0..=6).map(|k| 0.5 * k as f64).collect(),
        }
    }
}

struct Sample {
    level: usize,
    w: f64,
    v: f64,
    ln_v: f64,
    ln_t: f64,
    ln_x: f64,
    r2t: f64,
}

struct Candidate {
    b: f64,
    n: f64,
    m: f64,
    levels: Vec<f64>,
    slack: f64,
}

/// Per-level A(t) = max |v| / shape and the integrated slack
/// A sum w shape - sum w |v|, one exponential per sample.
fn evaluate(samples: &[Sample], nlev: usize, b: f64, n: f64, m: f64) -> Option<Candidate> {
    let mut ln_levels = vec![f64::NEG_INFINITY; nlev];
    let mut mass_shape = 0.0;
    let mut mass_v = 0.0;
    for s in samples {
        let ln_shape = -n * s.ln_t + m * s.ln_x - b * s.r2t;
        mass_shape += s.w * ln_shape.exp();
        mass_v += s.w * s.v;
        if s.v > 0.0 {
            let r = s.ln_v - ln_shape;
            if r > ln_levels[s.level] {
                ln_levels[s.level] = r;
            }
        }
    }
    let levels: Vec<f64> = ln_levels.iter().map(|l| l.exp()).collect();
    if levels.iter().any(|a| !a.is_finite()) || !mass_shape.is_finite() {
        return None;
    }
    let a = levels.iter().cloned().fold(0.0, f64::max);
    Some(Candidate { b, n, m, levels, slack: a * mass_shape - mass_v })
}

/// Non-decreasing up to a relative rounding allowance of 1e-9.
fn nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9))
}

/// Fit the envelope over a family of grids (one per t level, all sharing
/// y). The lattice node with the least integrated slack among those whose
/// per-level A(t) is non-decreasing wins (any node if none is); one level of
/// local refinement follows.
pub fn fit_envelope(family: &[DensityGrid], order: &DerivOrder, lattice: &EnvelopeLattice) -> Result<EnvelopeFit> {
    if family.len() < 2 {
        return Err(Error::Invalid("envelope fit needs at least two time levels".into()));
    }
    let mut fam: Vec<&DensityGrid> = family.iter().collect();
    fam.sort_by(|a, b| a.t.total_cmp(&b.t));
    let y = fam[0].y.clone();
    let mut samples = Vec::new();
    for (level, g) in fam.iter().enumerate() {
        if !(g.t > 0.0) {
            return Err(Error::BadTime { t: g.t, s: 0.0 });
        }
        let w = g.grid.weights();
        let mut x = vec![0.0; g.grid.dim()];
        for k in 0..g.grid.len() {
            let v = g.values[k];
            if !v.is_finite() {
                return Err(Error::Infeasible(format!("non-finite value at level t = {}", g.t)));
            }
            g.grid.point(k, &mut x);
            let r2: f64 = x.iter().zip(&y).map(|(a, c)| (a - c).powi(2)).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            samples.push(Sample {
                level,
                w: w[k],
                v: v.abs(),
                ln_v: v.abs().ln(),
                ln_t: g.t.ln(),
                ln_x: (1.0 + nx).ln(),
                r2t: r2 / g.t,
            });
        }
    }
    let nlev = fam.len();
    let search = |bs: &[f64], ns: &[f64], ms: &[f64]| -> Option<Candidate> {
        let nodes: Vec<(f64, f64, f64)> =
            bs.iter().flat_map(|&b| ns.iter().flat_map(move |&n| ms.iter().map(move |&m| (b, n, m)))).collect();
        let cands: Vec<Candidate> = nodes.par_iter().filter_map(|&(b, n, m)| evaluate(&samples, nlev, b, n, m)).collect();
        let pick = |ok: &dyn Fn(&Candidate) -> bool| {
            cands.iter().filter(|c| ok(c)).min_by(|a, b| a.slack.total_cmp(&b.slack)).map(|c| Candidate {
                b: c.b,
                n: c.n,
                m: c.m,
                levels: c.levels.clone(),
                slack: c.slack,
            })
        };
        pick(&|c| nondecreasing(&c.levels)).or_else(|| pick(&|_| true))
    };
    let coarse = search(&lattice.b, &lattice.n, &lattice.m)
        .ok_or_else(|| Error::Infeasible("no lattice node gives a finite A".into()))?;
    let step = |v: &[f64]| if v.len() > 1 { (v[1] - v[0]).abs() / 2.0 } else { 0.0 };
    let around = |c: f64, h: f64, lo: f64| -> Vec<f64> { [c - h, c, c + h].into_iter().filter(|&v| v >= lo).collect() };
    let fine = search(
        &around(coarse.b, step(&lattice.b), 1e-12),
        &around(coarse.n, step(&lattice.n), 0.0),
        &around(coarse.m, step(&lattice.m), 0.0),
    );
    // the refined search contains the coarse node, so it can only improve
    let best = fine.unwrap_or(coarse);
    let mut a = best.levels.iter().cloned().fold(0.0, f64::max);
    // exact re-check; nudge A up past rounding
    let margin_of = |a: f64| {
        samples
            .iter()
            .map(|s| a * (-best.n * s.ln_t + best.m * s.ln_x - best.b * s.r2t).exp() - s.v)
            .fold(f64::INFINITY, f64::min)
    };
    let mut margin = margin_of(a);
    let mut guard = 0;
    while margin < 0.0 && guard < 64 {
        a *= 1.0 + 4.0 * f64::EPSILON;
        margin = margin_of(a);
        guard += 1;
    }
    let violations = samples
        .iter()
        .filter(|s| a * (-best.n * s.ln_t + best.m * s.ln_x - best.b * s.r2t).exp() < s.v)
        .count();
    let levels: Vec<LevelFit> = (0..nlev)
        .map(|l| {
            let lv: Vec<&Sample> = samples.iter().filter(|s| s.level == l && s.v > 0.0).collect();
            // largest B with a exp(...) >= v: B <= (ln(a shape0) - ln v) / r2t
            let b = lv
                .iter()
                .filter(|s| s.r2t > 0.0)
                .map(|s| (a.ln() - best.n * s.ln_t + best.m * s.ln_x - s.v.ln()) / s.r2t)
                .fold(f64::INFINITY, f64::min);
            LevelFit { t: fam[l].t, a: best.levels[l], b }
        })
        .collect();
    Ok(EnvelopeFit {
        order: order.clone(),
        a,
        b: best.b,
        n_fit: best.n,
        m_fit: best.m,
        n_int: best.n.round() as i64,
        m_int: best.m.round() as i64,
        margin,
        violations,
        samples: samples.len(),
        a_nondecreasing: nondecreasing(&best.levels),
        levels,
        slack: best.slack,
    })
}

/// Standard bump exp(-1 / (1 - |z|^2)) on the unit ball.
pub fn bump(z: &[f64]) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// Coefficients convolved with the bump of radius 1/m by tensor
/// Gauss-Legendre quadrature; weights are normalized to sum to 1.
pub struct Mollified {
    base: Arc<dyn Coefficients>,
    pub scale: usize,
    pub radius: f64,
    nodes: Vec<(Vec<f64>, f64)>,
}

impl Mollified {
    pub fn new(base: Arc<dyn Coefficients>, scale: usize, points: usize) -> Result<Self> {
        if scale == 0 || points == 0 {
            return Err(Error::Invalid("mollification scale and points must be >= 1".into()));
        }
        let n = base.dim();
        let radius = 1.0 / scale as f64;
        let (gx, gw) = gauss_legendre(points);
        let mut nodes = Vec::new();
        let total = points.pow(n as u32);
        for c in 0..total {
            let mut r = c;
            let mut z = vec![0.0; n];
            let mut w = 1.0;
            for zd in z.iter_mut() {
                let k = r % points;
                r /= points;
                *zd = gx[k];
                w *= gw[k];
            }
            let b = bump(&z);
            if b > 0.0 {
                nodes.push((z.iter().map(|v| v * radius).collect(), w * b));
            }
        }
        let s: f64 = nodes.iter().map(|p| p.1).sum();
        nodes.iter_mut().for_each(|p| p.1 /= s);
        Ok(Mollified { base, scale, radius, nodes })
    }

    /// Sum of the normalized quadrature weights (1 up to rounding).
    pub fn weight_sum(&self) -> f64 {
        self.nodes.iter().map(|p| p.1).sum()
    }

    fn average(&self, x: &[f64], out: &mut [f64], f: impl Fn(&[f64], &mut [f64])) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut tmp = vec![0.0; out.len()];
        let mut p = x.to_vec();
        for (z, w) in &self.nodes {
            for d in 0..x.len() {
                p[d] = x[d] - z[d];
            }
            f(&p, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += w * v;
            }
        }
    }
}

impl Coefficients for Mollified {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn diffusion(&self, x: &[f64], a: &mut [f64]) {
        self.average(x, a, |p, o| self.base.diffusion(p, o));
    }
    fn drift(&self, x: &[f64], v: &mut [f64]) {
        self.average(x, v, |p, o| self.base.drift(p, o));
    }
}

/// Coefficients cached on a grid with cubic interpolation; points outside
/// the grid fall through to the source.
pub struct Tabulated {
    source: Arc<dyn Coefficients>,
    grid: TensorGrid,
    /// Component-major: n*n diffusion tables, then n drift tables.
    tables: Vec<Vec<f64>>,
}

impl Tabulated {
    pub fn new(source: Arc<dyn Coefficients>, grid: TensorGrid) -> Result<Self> {
        let n = source.dim();
        if grid.dim() != n {
            return Err(Error::Invalid("table grid dimension mismatch".into()));
        }
        let rows: Vec<Vec<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let mut x = vec![0.0; n];
                grid.point(k, &mut x);
                let mut a = vec![0.0; n * n];
                let mut v = vec![0.0; n];
                source.diffusion(&x, &mut a);
                source.drift(&x, &mut v);
                a.extend(v);
                a
            })
            .collect();
        let comps = n * n + n;
        let tables = (0..comps).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
        Ok(Tabulated { source, grid, tables })
    }

    fn inside(&self, x: &[f64]) -> bool {
        self.grid.axes.iter().zip(x).all(|(a, v)| *v >= a.lo && *v <= a.hi)
    }
}

impl Coefficients for Tabulated {
    fn dim(&self) -> usize {
        self.source.dim()
    }
    fn diffusion(&self, x: &[f64], a: &mut [f64]) {
        if !self.inside(x) {
            return self.source.diffusion(x, a);
        }
        for (k, o) in a.iter_mut().enumerate() {
            *o = self.grid.interpolate(&self.tables[k], x).0;
        }
    }
    fn drift(&self, x: &[f64], v: &mut [f64]) {
        if !self.inside(x) {
            return self.source.drift(x, v);
        }
        let n = self.dim();
        for (k, o) in v.iter_mut().enumerate() {
            *o = self.grid.interpolate(&self.tables[n * n + k], x).0;
        }
    }
}

/// Build the mollified entry for one scale.
pub fn mollify_coefficients(base: Arc<dyn Coefficients>, scale: usize) -> Result<Mollified> {
    let points = match base.dim() {
        1 => 64,
        2 => 24,
        _ => 10,
    };
    Mollified::new(base, scale, points)
}

/// Sup distance of all coefficient components over a point set.
pub fn coefficient_distance(p: &dyn Coefficients, q: &dyn Coefficients, pts: &[Vec<f64>]) -> f64 {
    let n = p.dim();
    pts.par_iter()
        .map(|x| {
            let (mut a, mut b) = (vec![0.0; n * n], vec![0.0; n * n]);
            let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
            p.diffusion(x, &mut a);
            q.diffusion(x, &mut b);
            p.drift(x, &mut u);
            q.drift(x, &mut v);
            a.iter().zip(&b).chain(u.iter().zip(&v)).map(|(s, t)| (s - t).abs()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Largest sampled difference quotient of any coefficient component over
/// pairs (x, x + h e_d).
pub fn lipschitz_estimate(c: &dyn Coefficients, pts: &[Vec<f64>], h: f64) -> f64 {
    let n = c.dim();
    pts.par_iter()
        .map(|x| {
            let mut best = 0.0f64;
            let (mut a0, mut a1) = (vec![0.0; n * n], vec![0.0; n * n]);
            let (mut v0, mut v1) = (vec![0.0; n], vec![0.0; n]);
            c.diffusion(x, &mut a0);
            c.drift(x, &mut v0);
            for d in 0..n {
                let mut z = x.clone();
                z[d] += h;
                c.diffusion(&z, &mut a1);
                c.drift(&z, &mut v1);
                for (p, q) in a0.iter().zip(&a1).chain(v0.iter().zip(&v1)) {
                    best = best.max((p - q).abs() / h);
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// Sup of |(L - L^m) p| on the interior of a grid, where
/// L - L^m = sum (a - a^m)_ij d_ij + (V_0 - V_0^m) . grad.
pub fn cross_residual(base: &dyn Coefficients, moll: &dyn Coefficients, p: &DensityGrid) -> Result<f64> {
    let n = p.grid.dim();
    let mut firsts = Vec::new();
    for d in 0..n {
        let mut al = vec![0; n];
        al[d] = 1;
        firsts.push(x_derivative(p, &al)?);
    }
    let mut seconds = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut al = vec![0; n];
            al[i] += 1;
            al[j] += 1;
            seconds.push(x_derivative(p, &al)?);
        }
    }
    let inner = p.grid.shrink(1)?;
    let mut x = vec![0.0; n];
    let mut worst = 0.0f64;
    let (mut a, mut am) = (vec![0.0; n * n], vec![0.0; n * n]);
    let (mut v, mut vm) = (vec![0.0; n], vec![0.0; n]);
    for k in 0..inner.len() {
        inner.point(k, &mut x);
        base.diffusion(&x, &mut a);
        moll.diffusion(&x, &mut am);
        base.drift(&x, &mut v);
        moll.drift(&x, &mut vm);
        let mut r = 0.0;
        for d in 0..n {
            let (val, _) = firsts[d].grid.interpolate(&firsts[d].values, &x);
            r += (v[d] - vm[d]) * val;
        }
        for i in 0..n {
            for j in 0..n {
                let da = a[i * n + j] - am[i * n + j];
                if da != 0.0 {
                    let g = &seconds[i * n + j];
                    r += da * g.grid.interpolate(&g.values, &x).0;
                }
            }
        }
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Cauchy report over a mollification ladder.
#[derive(Clone, Debug, Serialize)]
pub struct CauchyReport {
    pub scales: Vec<usize>,
    /// sup |a^m - a| and |V^m - V| on the compact sample set.
    pub coefficient_errors: Vec<f64>,
    pub lipschitz_base: f64,
    pub lipschitz: Vec<f64>,
    /// ||p^{m_{i+1}} - p^{m_i}|| in sup norm.
    pub differences: Vec<f64>,
    pub cross_residuals: Vec<f64>,
    pub masses: Vec<f64>,
    pub coefficients_converge: bool,
    pub lipschitz_preserved: bool,
    pub cauchy: bool,
    pub cross_decreasing: bool,
}

impl CauchyReport {
    pub fn passes(&self) -> bool {
        self.coefficients_converge && self.lipschitz_preserved && self.cauchy && self.cross_decreasing
    }
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Run the mollification ladder: tabulate each a^m, build p^m with
/// `build`, and compare consecutive members.
pub fn density_limit_check(
    base: Arc<dyn Coefficients>,
    scales: &[usize],
    compact: &BoxDomain,
    table: &TensorGrid,
    build: impl Fn(Arc<dyn Coefficients>) -> Result<DensityGrid>,
) -> Result<CauchyReport> {
    if scales.len() < 2 || !scales.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Invalid("the ladder needs increasing scales".into()));
    }
    let mut pts = sample_points(compact, 400, Sampling::Halton)?;
    // points on and near coordinate hyperplanes through the box center
    let n = base.dim();
    for d in 0..n {
        for k in 0..41 {
            let mut z: Vec<f64> = (0..n).map(|i| 0.5 * (compact.lo[i] + compact.hi[i])).collect();
            z[d] = 0.0f64.clamp(compact.lo[d], compact.hi[d]);
            let other = (d + 1) % n;
            if other != d {
                z[other] = compact.lo[other] + (compact.hi[other] - compact.lo[other]) * k as f64 / 40.0;
            }
            pts.push(z);
        }
    }
    let lipschitz_base = lipschitz_estimate(base.as_ref(), &pts, 1e-3);
    let mut coefficient_errors = Vec::new();
    let mut lipschitz = Vec::new();
    let mut densities = Vec::new();
    let mut models: Vec<Arc<dyn Coefficients>> = Vec::new();
    for &m in scales {
        let moll: Arc<dyn Coefficients> = Arc::new(mollify_coefficients(base.clone(), m)?);
        coefficient_errors.push(coefficient_distance(base.as_ref(), moll.as_ref(), &pts));
        lipschitz.push(lipschitz_estimate(moll.as_ref(), &pts, 1e-3));
        let tab: Arc<dyn Coefficients> = Arc::new(Tabulated::new(moll, table.clone())?);
        densities.push(build(tab.clone())?);
        models.push(tab);
    }
    let mut differences = Vec::new();
    for w in densities.windows(2) {
        differences.push(w[1].sup_distance(&w[0])?);
    }
    let mut cross_residuals = Vec::new();
    for (p, m) in densities.iter().zip(&models) {
        cross_residuals.push(cross_residual(base.as_ref(), m.as_ref(), p)?);
    }
    Ok(CauchyReport {
        scales: scales.to_vec(),
        coefficients_converge: non_increasing(&coefficient_errors),
        lipschitz_preserved: lipschitz.iter().all(|&l| l <= lipschitz_base + 1e-6),
        cauchy: strictly_decreasing(&differences),
        cross_decreasing: strictly_decreasing(&cross_residuals),
        masses: densities.iter().map(|d| d.mass()).collect(),
        coefficient_errors,
        lipschitz_base,
        lipschitz,
        differences,
        cross_residuals,
    })
}
