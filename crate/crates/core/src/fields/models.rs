//! Built-in models and the polynomial field text format.
//!
//! Text format, one item per line, `#` starts a comment:
//!
//! ```text
//! dim <n> <m>
//! <field> <component> <coeff> <e_1> ... <e_n>
//! ```
//!
//! Each term line adds `coeff * x_1^e_1 ... x_n^e_n` to component
//! `component` (0-based) of field `field` (0 = drift, 1..=m diffusion).

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Affine, BoxDomain, FieldFn, Hyperplane, Scalar, Smoothness, VectorField, VectorFieldSet};
use crate::error::{Error, Result};

/// Polynomial vector field.
#[derive(Clone, Debug, Default)]
pub struct Polynomial {
    pub n: usize,
    /// Per component: (coefficient, exponents).
    pub terms: Vec<Vec<(f64, Vec<u32>)>>,
}

impl Polynomial {
    pub fn new(n: usize) -> Self {
        Polynomial { n, terms: vec![Vec::new(); n] }
    }

    pub fn term(mut self, comp: usize, coeff: f64, exps: &[u32]) -> Self {
        self.terms[comp].push((coeff, exps.to_vec()));
        self
    }
}

impl FieldFn for Polynomial {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        for (r, comp) in self.terms.iter().enumerate() {
            let mut acc = x[0].cst(0.0);
            for (c, e) in comp {
                let mut t = x[0].cst(*c);
                for (k, &p) in e.iter().enumerate() {
                    if p > 0 {
                        t = t * x[k].powi(p);
                    }
                }
                acc = acc + t;
            }
            out[r] = acc;
        }
    }
}

/// Drift (-mu (x2 + kappa |x2|), 0): Lipschitz, kinked on x2 = 0.
#[derive(Clone, Debug)]
struct KinkShear {
    mu: f64,
    kappa: f64,
}

impl FieldFn for KinkShear {
    fn dim(&self) -> usize {
        2
    }
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = (x[1].clone() + x[1].abs() * self.kappa) * (-self.mu);
        out[1] = x[0].cst(0.0);
    }
}

/// One-dimensional column sqrt(base + amp sin x).
#[derive(Clone, Debug)]
struct SineColumn {
    base: f64,
    amp: f64,
}

impl FieldFn for SineColumn {
    fn dim(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S]) {
        out[0] = (x[0].sin() * self.amp + self.base).sqrt();
    }
}

/// A registry model: fields plus the parameters that produced them.
#[derive(Clone, Debug)]
pub struct Model {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub fields: VectorFieldSet,
}

impl Model {
    pub fn param(&self, k: &str) -> f64 {
        self.params.get(k).copied().unwrap_or(f64::NAN)
    }
}

/// Names accepted by [`builtin`].
pub fn builtin_names() -> &'static [&'static str] {
    &["kolmogorov", "grushin", "elliptic_ou", "weak_lipschitz", "sine_1d"]
}

fn defaults(name: &str) -> Option<Vec<(&'static str, f64)>> {
    let mut d = match name {
        "kolmogorov" => vec![("lambda2", 1.0), ("mu1", 1.0)],
        "grushin" => vec![],
        "elliptic_ou" => vec![("dim", 2.0), ("theta", 1.0), ("lambda", 1.0)],
        "weak_lipschitz" => vec![("mu", 1.0), ("kappa", 0.5), ("lambda", 1.0)],
        "sine_1d" => vec![("base", 1.0), ("amp", 0.1)],
        _ => return None,
    };
    d.extend([("box_lo", -20.0), ("box_hi", 20.0), ("order", super::DEFAULT_ORDER as f64)]);
    Some(d)
}

/// Build a named model. Unknown parameter keys are rejected.
///
/// Parameters (defaults in parentheses), all models also take
/// `box_lo` (-20), `box_hi` (20), `order` (4):
///
/// - `kolmogorov`: `lambda2` (1), `mu1` (1). sigma_1 = (0, sqrt(lambda2)),
///   V_0 = (-mu1 x2, 0).
/// - `grushin`: V_1 = (1, 0), V_2 = (0, x1), zero drift.
/// - `elliptic_ou`: `dim` (2), `theta` (1), `lambda` (1). sigma = sqrt(lambda) I,
///   V_0 = theta x (SDE drift -theta x).
/// - `weak_lipschitz`: `mu` (1), `kappa` (0.5), `lambda` (1).
///   sigma_1 = (0, sqrt(lambda)), V_0 = (-mu (x2 + kappa |x2|), 0).
/// - `sine_1d`: `base` (1), `amp` (0.1). a(x) = base + amp sin x, zero drift.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Model> {
    let defs = defaults(name).ok_or_else(|| Error::Invalid(format!("unknown model '{name}'")))?;
    let mut p: BTreeMap<String, f64> = defs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in params {
        if !p.contains_key(k) {
            return Err(Error::Invalid(format!("unknown parameter '{k}' for model '{name}'")));
        }
        if !v.is_finite() {
            return Err(Error::Invalid(format!("parameter '{k}' must be finite")));
        }
        p.insert(k.clone(), *v);
    }
    let g = |k: &str| p[k];
    let (n, fields, smooth): (usize, Vec<Arc<dyn VectorField>>, Smoothness) = match name {
        "kolmogorov" => {
            let (l2, m1) = (g("lambda2"), g("mu1"));
            if l2 <= 0.0 || m1 <= 0.0 {
                return Err(Error::Invalid("kolmogorov needs lambda2 > 0 and mu1 > 0".into()));
            }
            (
                2,
                vec![
                    Arc::new(Affine::linear(2, vec![0.0, -m1, 0.0, 0.0])),
                    Arc::new(Affine::constant(vec![0.0, l2.sqrt()])),
                ],
                Smoothness::Smooth,
            )
        }
        "grushin" => (
            2,
            vec![
                Arc::new(Affine::zero(2)),
                Arc::new(Affine::constant(vec![1.0, 0.0])),
                Arc::new(Affine::linear(2, vec![0.0, 0.0, 1.0, 0.0])),
            ],
            Smoothness::Smooth,
        ),
        "elliptic_ou" => {
            let d = g("dim");
            if d < 1.0 || d.fract() != 0.0 || d > 8.0 {
                return Err(Error::Invalid("elliptic_ou dim must be an integer in 1..=8".into()));
            }
            let n = d as usize;
            if g("lambda") <= 0.0 {
                return Err(Error::Invalid("elliptic_ou needs lambda > 0".into()));
            }
            let s = g("lambda").sqrt();
            let mut mat = vec![0.0; n * n];
            for i in 0..n {
                mat[i * n + i] = g("theta");
            }
            let mut f: Vec<Arc<dyn VectorField>> = vec![Arc::new(Affine::linear(n, mat))];
            for i in 0..n {
                let mut e = vec![0.0; n];
                e[i] = s;
                f.push(Arc::new(Affine::constant(e)));
            }
            (n, f, Smoothness::Smooth)
        }
        "weak_lipschitz" => {
            if g("lambda") <= 0.0 || g("mu") <= 0.0 || g("kappa").abs() >= 1.0 {
                return Err(Error::Invalid("weak_lipschitz needs lambda > 0, mu > 0, |kappa| < 1".into()));
            }
            (
                2,
                vec![
                    Arc::new(KinkShear { mu: g("mu"), kappa: g("kappa") }),
                    Arc::new(Affine::constant(vec![0.0, g("lambda").sqrt()])),
                ],
                Smoothness::Lipschitz { kinks: vec![Hyperplane { normal: vec![0.0, 1.0], offset: 0.0 }] },
            )
        }
        "sine_1d" => {
            if g("base") - g("amp").abs() <= 0.0 {
                return Err(Error::Invalid("sine_1d needs base > |amp|".into()));
            }
            (
                1,
                vec![Arc::new(Affine::zero(1)), Arc::new(SineColumn { base: g("base"), amp: g("amp") })],
                Smoothness::Smooth,
            )
        }
        _ => unreachable!(),
    };
    let order = g("order");
    if order < 1.0 || order.fract() != 0.0 || order > 12.0 {
        return Err(Error::Invalid("order must be an integer in 1..=12".into()));
    }
    if g("box_lo") >= g("box_hi") {
        return Err(Error::Invalid("box_lo must be below box_hi".into()));
    }
    let fields = VectorFieldSet::new(n, fields)?
        .with_order(order as usize)?
        .with_domain(BoxDomain::cube(n, g("box_lo"), g("box_hi")))?
        .with_smoothness(smooth);
    Ok(Model { name: name.to_string(), params: p, fields })
}

/// Parse the polynomial text format into a smooth field set.
pub fn parse_polynomial_fields(text: &str) -> Result<VectorFieldSet> {
    let mut header: Option<(usize, usize)> = None;
    let mut polys: Vec<Polynomial> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| Error::Parse(format!("line {}: {m}", ln + 1));
        if tok[0] == "dim" {
            if header.is_some() || tok.len() != 3 {
                return Err(bad("expected a single 'dim <n> <m>' header"));
            }
            let n: usize = tok[1].parse().map_err(|_| bad("bad n"))?;
            let m: usize = tok[2].parse().map_err(|_| bad("bad m"))?;
            if n == 0 {
                return Err(bad("n must be positive"));
            }
            header = Some((n, m));
            polys = vec![Polynomial::new(n); m + 1];
            continue;
        }
        let (n, m) = header.ok_or_else(|| bad("term before 'dim' header"))?;
        if tok.len() != 3 + n {
            return Err(bad(&format!("expected {} tokens", 3 + n)));
        }
        let f: usize = tok[0].parse().map_err(|_| bad("bad field index"))?;
        let c: usize = tok[1].parse().map_err(|_| bad("bad component"))?;
        let coeff: f64 = tok[2].parse().map_err(|_| bad("bad coefficient"))?;
        if f > m || c >= n || !coeff.is_finite() {
            return Err(bad("index out of range or non-finite coefficient"));
        }
        let exps: Vec<u32> = tok[3..]
            .iter()
            .map(|t| t.parse::<u32>().map_err(|_| bad("bad exponent")))
            .collect::<Result<_>>()?;
        polys[f].terms[c].push((coeff, exps));
    }
    let (n, _) = header.ok_or_else(|| Error::Parse("missing 'dim' header".into()))?;
    let fields: Vec<Arc<dyn VectorField>> = polys.into_iter().map(|p| Arc::new(p) as Arc<dyn VectorField>).collect();
    VectorFieldSet::new(n, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::BracketWord;

    #[test]
    fn kolmogorov_drift_value() {
        let mut p = BTreeMap::new();
        p.insert("mu1".to_string(), 1.5);
        let m = builtin("kolmogorov", &p).unwrap();
        assert_eq!(m.fields.evaluate(0, &[1.0, 2.0]).unwrap(), vec![-3.0, 0.0]);
    }

    #[test]
    fn kolmogorov_span_element() {
        let mut p = BTreeMap::new();
        p.insert("lambda2".to_string(), 2.0);
        p.insert("mu1".to_string(), 3.0);
        let m = builtin("kolmogorov", &p).unwrap();
        let b = m
            .fields
            .lie_bracket(&BracketWord::leaf(1), &BracketWord::leaf(0), &[0.4, -1.0])
            .unwrap();
        // [sigma_1, V_0] = (D V_0) sigma_1 = (-mu1 sqrt(lambda2), 0)
        assert!((b[0] + 3.0 * 2f64.sqrt()).abs() < 1e-14 && b[1] == 0.0);
    }

    #[test]
    fn constant_against_shear() {
        // f = (0, l2), g = (mu1 x2, 0): [f, g] = (l2 mu1, 0)
        let txt = "dim 2 1
0 0 3.0 0 1
1 1 2.0 0 0
";
        let f = parse_polynomial_fields(txt).unwrap();
        let b = f.lie_bracket(&BracketWord::leaf(1), &BracketWord::leaf(0), &[0.7, 0.2]).unwrap();
        assert_eq!(b, vec![6.0, 0.0]);
    }

    #[test]
    fn rejects_unknown() {
        let mut p = BTreeMap::new();
        p.insert("bogus".to_string(), 1.0);
        assert!(builtin("kolmogorov", &p).is_err());
        assert!(builtin("nope", &BTreeMap::new()).is_err());
    }

    #[test]
    fn polynomial_text() {
        let txt = "# V(x) = (x2^2, x1)\ndim 2 0\n0 0 1.0 0 2\n0 1 1.0 1 0\n";
        let f = parse_polynomial_fields(txt).unwrap();
        assert_eq!(f.evaluate(0, &[1.0, 2.0]).unwrap(), vec![4.0, 1.0]);
        assert!(parse_polynomial_fields("0 0 1 0 0").is_err());
        assert!(parse_polynomial_fields("dim 2 0\n0 5 1 0 0").is_err());
    }
}
