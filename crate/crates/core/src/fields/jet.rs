//! Truncated multivariate Taylor jets.
//!
//! A jet stores the Taylor coefficients of a function of `nvars` variables
//! up to total degree `order` around a base point. Products truncate, and
//! differentiation lowers the valid order by one.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

/// Scalar types the field evaluators are generic over.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant in the same space as `self`.
    fn cst(&self, c: f64) -> Self;
    fn val(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn sqrt(&self) -> Self;
    /// Absolute value; smooth only away from zero.
    fn abs(&self) -> Self;

    fn powi(&self, k: u32) -> Self {
        let mut r = self.cst(1.0);
        for _ in 0..k {
            r = r * self.clone();
        }
        r
    }
}

impl Scalar for f64 {
    fn cst(&self, c: f64) -> Self {
        c
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn powi(&self, k: u32) -> Self {
        f64::powi(*self, k as i32)
    }
}

/// Monomial layout shared by all jets of one (nvars, order) pair.
pub struct JetSpace {
    nvars: usize,
    order: usize,
    exps: Vec<Vec<u8>>,
    degree: Vec<usize>,
    mul: Vec<(usize, usize, usize)>,
    deriv: Vec<Vec<(usize, usize, f64)>>,
}

impl JetSpace {
    pub fn new(nvars: usize, order: usize) -> Arc<JetSpace> {
        let mut exps: Vec<Vec<u8>> = Vec::new();
        for d in 0..=order {
            let mut cur = vec![0u8; nvars];
            enumerate(nvars, d, 0, &mut cur, &mut exps);
        }
        let index: HashMap<Vec<u8>, usize> =
            exps.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        let degree: Vec<usize> = exps.iter().map(|e| e.iter().map(|&v| v as usize).sum()).collect();
        let mut mul = Vec::new();
        for i in 0..exps.len() {
            for j in 0..exps.len() {
                if degree[i] + degree[j] <= order {
                    let s: Vec<u8> = exps[i].iter().zip(&exps[j]).map(|(a, b)| a + b).collect();
                    mul.push((i, j, index[&s]));
                }
            }
        }
        let mut deriv = vec![Vec::new(); nvars];
        for (c, dc) in deriv.iter_mut().enumerate() {
            for (i, e) in exps.iter().enumerate() {
                if e[c] > 0 {
                    let mut lower = e.clone();
                    lower[c] -= 1;
                    dc.push((i, index[&lower], e[c] as f64));
                }
            }
        }
        Arc::new(JetSpace { nvars, order, exps, degree, mul, deriv })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn len(&self) -> usize {
        self.exps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }
    pub fn exponents(&self, i: usize) -> &[u8] {
        &self.exps[i]
    }

    /// Jet of the coordinate function x_i around `x0`.
    pub fn variable(self: &Arc<Self>, i: usize, x0: f64) -> Jet {
        let mut c = vec![0.0; self.len()];
        c[0] = x0;
        if self.order >= 1 {
            c[1 + i] = 1.0;
        }
        Jet { space: self.clone(), order: self.order, c }
    }

    pub fn constant(self: &Arc<Self>, v: f64) -> Jet {
        let mut c = vec![0.0; self.len()];
        c[0] = v;
        Jet { space: self.clone(), order: self.order, c }
    }

    /// Jets of all coordinates around the point `x`.
    pub fn point(self: &Arc<Self>, x: &[f64]) -> Vec<Jet> {
        x.iter().enumerate().map(|(i, &v)| self.variable(i, v)).collect()
    }
}

fn enumerate(n: usize, d: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos + 1 == n {
        cur[pos] = d as u8;
        out.push(cur.clone());
        return;
    }
    for k in (0..=d).rev() {
        cur[pos] = k as u8;
        enumerate(n, d - k, pos + 1, cur, out);
    }
}

/// Truncated Taylor polynomial. `order` is the highest degree whose
/// coefficients are trustworthy.
#[derive(Clone)]
pub struct Jet {
    space: Arc<JetSpace>,
    order: usize,
    c: Vec<f64>,
}

impl fmt::Debug for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Jet").field("order", &self.order).field("c", &self.c).finish()
    }
}

impl Jet {
    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    /// First partial derivative at the base point.
    pub fn grad(&self, c: usize) -> f64 {
        self.c[1 + c]
    }

    /// Jet of the partial derivative in variable `c`; `None` at order 0.
    pub fn diff(&self, c: usize) -> Option<Jet> {
        if self.order == 0 {
            return None;
        }
        let mut out = vec![0.0; self.c.len()];
        for &(from, to, k) in &self.space.deriv[c] {
            out[to] = k * self.c[from];
        }
        let order = self.order - 1;
        for (i, v) in out.iter_mut().enumerate() {
            if self.space.degree[i] > order {
                *v = 0.0;
            }
        }
        Some(Jet { space: self.space.clone(), order, c: out })
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.c
            .iter()
            .enumerate()
            .all(|(i, v)| self.space.degree[i] > self.order || v.abs() <= tol)
    }

    fn compose(&self, derivs: &[f64]) -> Jet {
        // f(u0 + d) = sum_k f^(k)(u0) d^k / k!
        let mut d = self.clone();
        d.c[0] = 0.0;
        let mut out = self.cst(derivs[0]);
        out.order = self.order;
        let mut pow = self.cst(1.0);
        let mut fact = 1.0;
        for (k, &dk) in derivs.iter().enumerate().skip(1) {
            pow = pow * d.clone();
            fact *= k as f64;
            out = out + pow.clone() * (dk / fact);
        }
        out
    }

    fn taylor_order(&self) -> usize {
        self.space.order
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a += b;
        }
        self.order = self.order.min(rhs.order);
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a -= b;
        }
        self.order = self.order.min(rhs.order);
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut out = vec![0.0; self.c.len()];
        for &(i, j, k) in &self.space.mul {
            out[k] += self.c[i] * rhs.c[j];
        }
        Jet { space: self.space, order: self.order.min(rhs.order), c: out }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for a in self.c.iter_mut() {
            *a = -*a;
        }
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.c[0] += rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        for a in self.c.iter_mut() {
            *a *= rhs;
        }
        self
    }
}

impl Scalar for Jet {
    fn cst(&self, c: f64) -> Self {
        self.space.constant(c)
    }
    fn val(&self) -> f64 {
        self.c[0]
    }
    fn sin(&self) -> Self {
        let u = self.c[0];
        let d: Vec<f64> = (0..=self.taylor_order())
            .map(|k| (u + k as f64 * std::f64::consts::FRAC_PI_2).sin())
            .collect();
        self.compose(&d)
    }
    fn cos(&self) -> Self {
        let u = self.c[0];
        let d: Vec<f64> = (0..=self.taylor_order())
            .map(|k| (u + k as f64 * std::f64::consts::FRAC_PI_2).cos())
            .collect();
        self.compose(&d)
    }
    fn exp(&self) -> Self {
        let e = self.c[0].exp();
        self.compose(&vec![e; self.taylor_order() + 1])
    }
    fn sqrt(&self) -> Self {
        let u = self.c[0];
        let mut d = Vec::with_capacity(self.taylor_order() + 1);
        let mut coef = 1.0;
        for k in 0..=self.taylor_order() {
            d.push(coef * u.powf(0.5 - k as f64));
            coef *= 0.5 - k as f64;
        }
        self.compose(&d)
    }
    fn abs(&self) -> Self {
        if self.c[0] < 0.0 {
            -self.clone()
        } else {
            self.clone()
        }
    }
}
