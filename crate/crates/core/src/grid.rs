//! Tensor grids, density grids and their CSV form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform axis with `n` nodes from `lo` to `hi` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi || n < 2 {
            return Err(Error::Invalid(format!("bad axis {lo}:{hi}:{n}")));
        }
        Ok(Axis { lo, hi, n })
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.h() * i as f64
        }
    }

    /// Trapezoid weight of node i.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n {
            0.5 * self.h()
        } else {
            self.h()
        }
    }
}

/// Row-major tensor grid, first axis slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Axis>,
}

impl TensorGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Invalid("grid needs at least one axis".into()));
        }
        Ok(TensorGrid { axes })
    }

    /// Parse `lo:hi:n,lo:hi:n,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let axes = spec
            .split(',')
            .map(|a| {
                let p: Vec<&str> = a.trim().split(':').collect();
                if p.len() != 3 {
                    return Err(Error::Parse(format!("axis '{a}' is not lo:hi:n")));
                }
                let lo: f64 = p[0].parse().map_err(|_| Error::Parse(format!("bad lo in '{a}'")))?;
                let hi: f64 = p[1].parse().map_err(|_| Error::Parse(format!("bad hi in '{a}'")))?;
                let n: usize = p[2].parse().map_err(|_| Error::Parse(format!("bad n in '{a}'")))?;
                Axis::new(lo, hi, n)
            })
            .collect::<Result<Vec<_>>>()?;
        TensorGrid::new(axes)
    }

    /// Text form accepted by [`TensorGrid::parse`].
    pub fn spec(&self) -> String {
        self.axes.iter().map(|a| format!("{}:{}:{}", a.lo, a.hi, a.n)).collect::<Vec<_>>().join(",")
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn multi(&self, mut idx: usize, out: &mut [usize]) {
        for d in (0..self.dim()).rev() {
            out[d] = idx % self.axes[d].n;
            idx /= self.axes[d].n;
        }
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        let mut k = 0;
        for (d, &i) in multi.iter().enumerate() {
            k = k * self.axes[d].n + i;
        }
        k
    }

    /// Stride of axis d in the flat layout.
    pub fn stride(&self, d: usize) -> usize {
        self.axes[d + 1..].iter().map(|a| a.n).product()
    }

    pub fn point(&self, idx: usize, out: &mut [f64]) {
        let mut m = vec![0usize; self.dim()];
        self.multi(idx, &mut m);
        for d in 0..self.dim() {
            out[d] = self.axes[d].coord(m[d]);
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|k| {
                let mut p = vec![0.0; self.dim()];
                self.point(k, &mut p);
                p
            })
            .collect()
    }

    /// Tensor trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        let mut m = vec![0usize; self.dim()];
        (0..self.len())
            .map(|k| {
                self.multi(k, &mut m);
                m.iter().enumerate().map(|(d, &i)| self.axes[d].weight(i)).product()
            })
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.h()).product()
    }

    /// Same axes without `k` boundary nodes on each side.
    pub fn shrink(&self, k: usize) -> Result<TensorGrid> {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                if a.n < 2 * k + 2 {
                    return Err(Error::Invalid("grid too small for stencil".into()));
                }
                Axis::new(a.coord(k), a.coord(a.n - 1 - k), a.n - 2 * k)
            })
            .collect::<Result<Vec<_>>>()?;
        TensorGrid::new(axes)
    }

    /// Cubic Lagrange tensor interpolation with constant extension. The
    /// flag is true when `x` had to be clamped into the box.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> (f64, bool) {
        let dim = self.dim();
        let mut clamped = false;
        let mut base = [0usize; 8];
        let mut w = [[0.0f64; 4]; 8];
        let mut idx = [[0usize; 4]; 8];
        for d in 0..dim {
            let a = &self.axes[d];
            let mut u = (x[d] - a.lo) / a.h();
            if !(u >= 0.0) {
                clamped |= x[d] < a.lo || u.is_nan();
                u = 0.0;
            }
            let last = (a.n - 1) as f64;
            if u > last {
                clamped = true;
                u = last;
            }
            let i = (u.floor() as usize).min(a.n - 2);
            let s = u - i as f64;
            w[d] = cubic_weights(s);
            for k in 0..4 {
                let j = i as isize + k as isize - 1;
                idx[d][k] = j.clamp(0, a.n as isize - 1) as usize;
            }
            base[d] = i;
        }
        let mut acc = 0.0;
        let total = 4usize.pow(dim as u32);
        for c in 0..total {
            let mut flat = 0usize;
            let mut wt = 1.0;
            let mut r = c;
            for d in 0..dim {
                let k = r % 4;
                r /= 4;
                wt *= w[d][k];
                flat = flat * self.axes[d].n + idx[d][k];
            }
            if wt != 0.0 {
                acc += wt * values[flat];
            }
        }
        (acc, clamped)
    }
}

/// Cubic Lagrange weights for nodes -1, 0, 1, 2 at offset s in [0, 1].
pub fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// How a density grid was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Parametrix { order: usize },
    Trotter { m: usize },
    MonteCarlo { paths: usize, steps: usize, seed: u64 },
    Exact,
    Blend,
    External,
}

impl Method {
    pub fn tag(&self) -> String {
        match self {
            Method::Parametrix { order } => format!("parametrix-order-{order}"),
            Method::Trotter { .. } => "trotter".into(),
            Method::MonteCarlo { .. } => "mc".into(),
            Method::Exact => "exact".into(),
            Method::Blend => "blend".into(),
            Method::External => "external".into(),
        }
    }
}

/// Sampled density p(t, x; s, y) on a tensor grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub method: Method,
    pub model: String,
    pub y: Vec<f64>,
    pub s: f64,
    pub t: f64,
    pub grid: TensorGrid,
    pub values: Vec<f64>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl DensityGrid {
    pub fn new(method: Method, model: &str, y: &[f64], t: f64, grid: TensorGrid, values: Vec<f64>) -> Self {
        DensityGrid {
            method,
            model: model.to_string(),
            y: y.to_vec(),
            s: 0.0,
            t,
            grid,
            values,
            meta: BTreeMap::new(),
        }
    }

    /// Trapezoid integral of the values.
    pub fn mass(&self) -> f64 {
        self.grid.weights().iter().zip(&self.values).map(|(w, v)| w * v).sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Trapezoid integral of f * p.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let w = self.grid.weights();
        let mut x = vec![0.0; self.grid.dim()];
        (0..self.grid.len())
            .map(|k| {
                self.grid.point(k, &mut x);
                w[k] * self.values[k] * f(&x)
            })
            .sum()
    }

    fn check_aligned(&self, o: &DensityGrid) -> Result<()> {
        if self.grid != o.grid {
            return Err(Error::Invalid("density grids are not aligned".into()));
        }
        Ok(())
    }

    pub fn sup_distance(&self, o: &DensityGrid) -> Result<f64> {
        self.check_aligned(o)?;
        Ok(self.values.iter().zip(&o.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Half the L1 distance.
    pub fn tv_distance(&self, o: &DensityGrid) -> Result<f64> {
        self.check_aligned(o)?;
        let w = self.grid.weights();
        Ok(0.5 * w.iter().zip(self.values.iter().zip(&o.values)).map(|(w, (a, b))| w * (a - b).abs()).sum::<f64>())
    }

    /// CSV with header `t,x1,...,xn,value`.
    pub fn to_csv(&self) -> String {
        let n = self.grid.dim();
        let mut s = String::from("t");
        for d in 0..n {
            let _ = write!(s, ",x{}", d + 1);
        }
        s.push_str(",value\n");
        let mut x = vec![0.0; n];
        for k in 0..self.grid.len() {
            self.grid.point(k, &mut x);
            let _ = write!(s, "{}", self.t);
            for v in &x {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", self.values[k]);
        }
        s
    }

    /// Parse the CSV form. Axes are inferred from the distinct coordinates.
    pub fn from_csv(text: &str) -> Result<DensityGrid> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "t" || *cols.last().unwrap() != "value" {
            return Err(Error::Parse("header must be t,x1,...,value".into()));
        }
        let n = cols.len() - 2;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("row {}: bad number", i + 2))))
                .collect::<Result<_>>()?;
            if r.len() != n + 2 {
                return Err(Error::Parse(format!("row {} has {} columns", i + 2, r.len())));
            }
            rows.push(r);
        }
        if rows.is_empty() {
            return Err(Error::Parse("csv has no rows".into()));
        }
        let t = rows[0][0];
        let mut axes = Vec::new();
        for d in 0..n {
            let mut c: Vec<f64> = rows.iter().map(|r| r[1 + d]).collect();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.dedup();
            axes.push(Axis::new(c[0], *c.last().unwrap(), c.len())?);
        }
        let grid = TensorGrid::new(axes)?;
        if grid.len() != rows.len() {
            return Err(Error::Parse("rows do not form a full tensor grid".into()));
        }
        let mut x = vec![0.0; n];
        let mut values = Vec::with_capacity(rows.len());
        for (k, r) in rows.iter().enumerate() {
            grid.point(k, &mut x);
            let tol = 1e-9 * grid.axes.iter().map(|a| a.hi - a.lo).fold(0.0, f64::max);
            if x.iter().zip(&r[1..=n]).any(|(a, b)| (a - b).abs() > tol) {
                return Err(Error::Parse("rows are not in grid order or spacing is not uniform".into()));
            }
            values.push(r[n + 1]);
        }
        Ok(DensityGrid::new(Method::External, "", &[], t, grid, values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_index() {
        let g = TensorGrid::parse("-1:1:3,0:2:5").unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(g.stride(0), 5);
        let mut m = [0; 2];
        g.multi(7, &mut m);
        assert_eq!(m, [1, 2]);
        assert_eq!(g.flat(&m), 7);
        let mut p = [0.0; 2];
        g.point(7, &mut p);
        assert_eq!(p, [0.0, 1.0]);
        assert!((g.weights().iter().sum::<f64>() - 4.0).abs() < 1e-14);
        assert!(TensorGrid::parse("1:0:3").is_err());
    }

    #[test]
    fn interpolation_is_exact_for_cubics() {
        let g = TensorGrid::parse("0:1:11,-1:1:9").unwrap();
        let f = |x: &[f64]| x[0].powi(3) - 2.0 * x[0] * x[1] + x[1].powi(2);
        let v: Vec<f64> = g.points().iter().map(|p| f(p)).collect();
        let (val, cl) = g.interpolate(&v, &[0.437, 0.123]);
        assert!(!cl);
        assert!((val - f(&[0.437, 0.123])).abs() < 1e-12);
        let (_, cl) = g.interpolate(&v, &[1.5, 0.0]);
        assert!(cl);
    }

    #[test]
    fn csv_round_trip() {
        let g = TensorGrid::parse("0:1:4,-2:2:3").unwrap();
        let v: Vec<f64> = (0..12).map(|k| (k as f64).sqrt() / 3.0).collect();
        let d = DensityGrid::new(Method::Exact, "m", &[0.0, 0.0], 0.25, g, v);
        let back = DensityGrid::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back.values, d.values);
        assert_eq!(back.grid, d.grid);
        assert_eq!(back.to_csv(), d.to_csv());
    }
}
