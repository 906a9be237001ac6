//! Vector fields with jet-based derivatives, Lie brackets and bracket words.

mod jet;
mod models;
mod word;

use std::sync::Arc;

use nalgebra::DMatrix;

pub use jet::{Jet, JetSpace, Scalar};
pub use models::{builtin, builtin_names, parse_polynomial_fields, Model, Polynomial};
pub use word::BracketWord;

use crate::error::{Error, Result};

/// A field written once, generically over the scalar type.
pub trait FieldFn: Send + Sync + 'static {
    fn dim(&self) -> usize;
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]);
}

/// Object-safe evaluator used by [`VectorFieldSet`].
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    fn eval_jet(&self, x: &[Jet], out: &mut [Jet]);
}

impl<T: FieldFn> VectorField for T {
    fn dim(&self) -> usize {
        FieldFn::dim(self)
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.apply(x, out)
    }
    fn eval_jet(&self, x: &[Jet], out: &mut [Jet]) {
        self.apply(x, out)
    }
}

/// Affine field x -> M x + c, with M row-major.
#[derive(Clone, Debug)]
pub struct Affine {
    pub n: usize,
    pub mat: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn constant(v: Vec<f64>) -> Self {
        let n = v.len();
        Affine { n, mat: vec![0.0; n * n], offset: v }
    }
    pub fn linear(n: usize, mat: Vec<f64>) -> Self {
        Affine { n, mat, offset: vec![0.0; n] }
    }
    pub fn zero(n: usize) -> Self {
        Affine::constant(vec![0.0; n])
    }
}

impl FieldFn for Affine {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        for r in 0..self.n {
            let mut acc = x[0].cst(self.offset[r]);
            for c in 0..self.n {
                let m = self.mat[r * self.n + c];
                if m != 0.0 {
                    acc = acc + x[c].clone() * m;
                }
            }
            out[r] = acc;
        }
    }
}

/// Hyperplane {x : normal . x = offset}.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Hyperplane {
    pub fn contains(&self, x: &[f64]) -> bool {
        let s: f64 = self.normal.iter().zip(x).map(|(a, b)| a * b).sum();
        s == self.offset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Smoothness {
    Smooth,
    /// Globally Lipschitz, smooth off the listed hyperplanes.
    Lipschitz { kinks: Vec<Hyperplane> },
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn cube(n: usize, lo: f64, hi: f64) -> Self {
        BoxDomain { lo: vec![lo; n], hi: vec![hi; n] }
    }
    pub fn dim(&self) -> usize {
        self.lo.len()
    }
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Drift field (index 0) plus m diffusion columns.
#[derive(Clone)]
pub struct VectorFieldSet {
    n: usize,
    fields: Vec<Arc<dyn VectorField>>,
    order: usize,
    smoothness: Smoothness,
    domain: BoxDomain,
}

impl std::fmt::Debug for VectorFieldSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldSet")
            .field("n", &self.n)
            .field("count", &self.fields.len())
            .field("order", &self.order)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

pub const DEFAULT_ORDER: usize = 4;

impl VectorFieldSet {
    /// `fields[0]` is the drift, the rest are diffusion columns.
    pub fn new(n: usize, fields: Vec<Arc<dyn VectorField>>) -> Result<Self> {
        if n == 0 || fields.is_empty() {
            return Err(Error::Invalid("need n >= 1 and at least a drift field".into()));
        }
        if let Some(f) = fields.iter().find(|f| f.dim() != n) {
            return Err(Error::Invalid(format!("field of dimension {} in a {n}-dimensional set", f.dim())));
        }
        Ok(VectorFieldSet {
            n,
            fields,
            order: DEFAULT_ORDER,
            smoothness: Smoothness::Smooth,
            domain: BoxDomain::cube(n, f64::NEG_INFINITY, f64::INFINITY),
        })
    }

    pub fn with_order(mut self, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Invalid("derivative order must be at least 1".into()));
        }
        self.order = order;
        Ok(self)
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Result<Self> {
        if domain.dim() != self.n {
            return Err(Error::Invalid("domain dimension mismatch".into()));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }
    /// m + 1.
    pub fn count(&self) -> usize {
        self.fields.len()
    }
    /// m.
    pub fn diffusion_count(&self) -> usize {
        self.fields.len() - 1
    }
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }
    pub fn smoothness(&self) -> &Smoothness {
        &self.smoothness
    }
    pub fn field(&self, i: usize) -> &Arc<dyn VectorField> {
        &self.fields[i]
    }

    pub fn in_smooth_set(&self, x: &[f64]) -> bool {
        match &self.smoothness {
            Smoothness::Smooth => true,
            Smoothness::Lipschitz { kinks } => !kinks.iter().any(|h| h.contains(x)),
        }
    }

    fn check(&self, i: usize, x: &[f64]) -> Result<()> {
        if i >= self.fields.len() {
            return Err(Error::UnknownIndex { index: i, count: self.fields.len() });
        }
        if x.len() != self.n || !self.domain.contains(x) {
            return Err(Error::OutOfDomain(x.to_vec()));
        }
        Ok(())
    }

    /// V_i(x).
    pub fn evaluate(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check(i, x)?;
        let mut out = vec![0.0; self.n];
        self.fields[i].eval(x, &mut out);
        Ok(out)
    }

    /// Unchecked fast path used by solvers.
    pub fn eval_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.fields[i].eval(x, out)
    }

    /// Entry (r, c) = d v_ri / d x_c.
    pub fn jacobian(&self, i: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(i, x)?;
        let gens = self.jets_of(&[i], x, 1)?;
        Ok(jacobian_of(&gens[0]))
    }

    /// Central-difference Jacobian, for cross-checks.
    pub fn jacobian_fd(&self, i: usize, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
        self.check(i, x)?;
        let mut j = DMatrix::zeros(self.n, self.n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; self.n];
        let mut fm = vec![0.0; self.n];
        for c in 0..self.n {
            xp[c] = x[c] + h;
            self.fields[i].eval(&xp, &mut fp);
            xp[c] = x[c] - h;
            self.fields[i].eval(&xp, &mut fm);
            xp[c] = x[c];
            for r in 0..self.n {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        Ok(j)
    }

    fn jets_of(&self, idx: &[usize], x: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        if order > self.order {
            return Err(Error::OrderExhausted { needed: order, available: self.order });
        }
        if order > 0 && !self.in_smooth_set(x) {
            return Err(Error::NonSmoothPoint(x.to_vec()));
        }
        let space = JetSpace::new(self.n, order);
        let xs = space.point(x);
        Ok(idx
            .iter()
            .map(|&i| {
                let mut out = vec![space.constant(0.0); self.n];
                self.fields[i].eval_jet(&xs, &mut out);
                out
            })
            .collect())
    }

    /// Jets of every generator at `x`, truncated at `order`.
    pub fn generator_jets(&self, x: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        if x.len() != self.n || !self.domain.contains(x) {
            return Err(Error::OutOfDomain(x.to_vec()));
        }
        let idx: Vec<usize> = (0..self.fields.len()).collect();
        self.jets_of(&idx, x, order)
    }

    fn check_word(&self, w: &BracketWord) -> Result<()> {
        if w.max_index() >= self.fields.len() {
            return Err(Error::UnknownIndex { index: w.max_index(), count: self.fields.len() });
        }
        Ok(())
    }

    /// Recursive evaluation of a bracket tree.
    pub fn evaluate_word(&self, w: &BracketWord, x: &[f64]) -> Result<Vec<f64>> {
        let d = w.depth();
        if d + 1 > self.order {
            return Err(Error::OrderExhausted { needed: d + 1, available: self.order });
        }
        self.word_value(w, x)
    }

    fn word_value(&self, w: &BracketWord, x: &[f64]) -> Result<Vec<f64>> {
        self.check_word(w)?;
        let d = w.depth();
        if d == 0 {
            return self.evaluate(w.max_index(), x);
        }
        let gens = self.generator_jets(x, d)?;
        let j = word_jet(w, &gens)?;
        Ok(values(&j))
    }

    /// (Dg) f - (Df) g at x.
    pub fn lie_bracket(&self, f: &BracketWord, g: &BracketWord, x: &[f64]) -> Result<Vec<f64>> {
        let d = f.depth() + g.depth();
        if d + 1 > self.order {
            return Err(Error::OrderExhausted { needed: d + 1, available: self.order });
        }
        self.word_value(&BracketWord::bracket(f.clone(), g.clone()), x)
    }

    /// a(x) = sum_i sigma_i sigma_i^T, row-major.
    pub fn diffusion_into(&self, x: &[f64], a: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        a[..n * n].iter_mut().for_each(|v| *v = 0.0);
        for f in &self.fields[1..] {
            f.eval(x, scratch);
            for r in 0..n {
                for c in 0..n {
                    a[r * n + c] += scratch[r] * scratch[c];
                }
            }
        }
    }
}

/// Values of a vector of jets.
pub fn values(v: &[Jet]) -> Vec<f64> {
    v.iter().map(|j| j.val()).collect()
}

/// Jacobian read off first-order coefficients.
pub fn jacobian_of(v: &[Jet]) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_fn(n, n, |r, c| v[r].grad(c))
}

/// [f, g] = (Dg) f - (Df) g on jets.
pub fn bracket_jets(f: &[Jet], g: &[Jet]) -> Result<Vec<Jet>> {
    let n = f.len();
    let avail = f.iter().chain(g).map(|j| j.order()).min().unwrap_or(0);
    if avail == 0 {
        return Err(Error::OrderExhausted { needed: 1, available: 0 });
    }
    let df: Vec<Vec<Jet>> = f.iter().map(|fr| (0..n).map(|c| fr.diff(c).unwrap()).collect()).collect();
    let dg: Vec<Vec<Jet>> = g.iter().map(|gr| (0..n).map(|c| gr.diff(c).unwrap()).collect()).collect();
    Ok((0..n)
        .map(|r| {
            let mut acc = f[0].cst(0.0);
            for c in 0..n {
                acc = acc + dg[r][c].clone() * f[c].clone() - df[r][c].clone() * g[c].clone();
            }
            acc
        })
        .collect())
}

/// Evaluate a word on precomputed generator jets.
pub fn word_jet(w: &BracketWord, gens: &[Vec<Jet>]) -> Result<Vec<Jet>> {
    match w {
        BracketWord::Leaf(i) => gens
            .get(*i)
            .cloned()
            .ok_or(Error::UnknownIndex { index: *i, count: gens.len() }),
        BracketWord::Node(f, g) => bracket_jets(&word_jet(f, gens)?, &word_jet(g, gens)?),
    }
}

/// -sum_i (D V_i) V_i over diffusion columns: the drift of the sum-of-squares form.
pub fn reduced_drift_jet(gens: &[Vec<Jet>]) -> Result<Vec<Jet>> {
    let n = gens[0].len();
    let mut out: Vec<Jet> = vec![gens[0][0].cst(0.0); n];
    for v in &gens[1..] {
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..n {
                let d = v[r].diff(c).ok_or(Error::OrderExhausted { needed: 1, available: 0 })?;
                *o = o.clone() - d * v[c].clone();
            }
        }
    }
    Ok(out)
}

/// Coefficient view consumed by kernels, parametrix and splitting:
/// d_t u = sum a_ij d_ij u + V_0 . grad u.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    /// a(x), row-major n x n.
    fn diffusion(&self, x: &[f64], a: &mut [f64]);
    /// Generator-form drift V_0(x).
    fn drift(&self, x: &[f64], v: &mut [f64]);
    /// Row-major Jacobian of V_0.
    fn drift_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let h = 1e-6;
        let mut j = vec![0.0; n * n];
        let mut xp = x.to_vec();
        let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
        for c in 0..n {
            xp[c] = x[c] + h;
            self.drift(&xp, &mut fp);
            xp[c] = x[c] - h;
            self.drift(&xp, &mut fm);
            xp[c] = x[c];
            for r in 0..n {
                j[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        Ok(j)
    }
}

impl Coefficients for VectorFieldSet {
    fn dim(&self) -> usize {
        self.n
    }
    fn diffusion(&self, x: &[f64], a: &mut [f64]) {
        let mut s = vec![0.0; self.n];
        self.diffusion_into(x, a, &mut s);
    }
    fn drift(&self, x: &[f64], v: &mut [f64]) {
        self.fields[0].eval(x, v)
    }
    fn drift_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.jets_of(&[0], x, 1)?;
        let n = self.n;
        Ok((0..n * n).map(|k| j[0][k / n].grad(k % n)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SinSq;
    impl FieldFn for SinSq {
        fn dim(&self) -> usize {
            2
        }
        fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
            out[0] = x[1].sin();
            out[1] = x[0].clone() * x[0].clone();
        }
    }

    fn grushin() -> VectorFieldSet {
        VectorFieldSet::new(
            2,
            vec![
                Arc::new(Affine::zero(2)),
                Arc::new(Affine::constant(vec![1.0, 0.0])),
                Arc::new(Affine::linear(2, vec![0.0, 0.0, 1.0, 0.0])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn jacobian_matches_fd_oracle() {
        let fs = VectorFieldSet::new(2, vec![Arc::new(SinSq)]).unwrap();
        let j = fs.jacobian(0, &[1.0, 0.0]).unwrap();
        let fd = fs.jacobian_fd(0, &[1.0, 0.0], 1e-5).unwrap();
        assert!((j[(0, 1)] - 1.0).abs() < 1e-14 && (j[(1, 0)] - 2.0).abs() < 1e-14);
        assert!((j - fd).abs().max() < 1e-9);
    }

    #[test]
    fn grushin_brackets() {
        let g = grushin();
        let v1 = BracketWord::leaf(1);
        let v2 = BracketWord::leaf(2);
        let b = g.lie_bracket(&v2, &v1, &[0.3, -2.0]).unwrap();
        assert_eq!(b, vec![0.0, -1.0]);
        let w = BracketWord::bracket(BracketWord::bracket(v2, v1.clone()), v1);
        assert_eq!(g.evaluate_word(&w, &[0.3, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn order_and_domain_errors() {
        let g = grushin().with_order(1).unwrap();
        let w: BracketWord = "[V1,V2]".parse().unwrap();
        assert!(matches!(g.evaluate_word(&w, &[0.0, 0.0]), Err(Error::OrderExhausted { .. })));
        let g = grushin().with_domain(BoxDomain::cube(2, -1.0, 1.0)).unwrap();
        assert!(matches!(g.evaluate(1, &[2.0, 0.0]), Err(Error::OutOfDomain(_))));
        assert!(matches!(g.evaluate(5, &[0.0, 0.0]), Err(Error::UnknownIndex { .. })));
    }

    #[test]
    fn lipschitz_set_rejects_kink() {
        let g = grushin().with_smoothness(Smoothness::Lipschitz {
            kinks: vec![Hyperplane { normal: vec![0.0, 1.0], offset: 0.0 }],
        });
        assert!(matches!(g.jacobian(2, &[0.5, 0.0]), Err(Error::NonSmoothPoint(_))));
        assert!(g.jacobian(2, &[0.5, 0.1]).is_ok());
        assert!(g.evaluate(2, &[0.5, 0.0]).is_ok());
    }
}
