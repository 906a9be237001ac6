//! Bracket-space recursion, numerical rank and condition probes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{bracket_jets, reduced_drift_jet, values, BoxDomain, BracketWord, Jet, VectorFieldSet};
use crate::grid::TensorGrid;

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Seed with the diffusion columns, bracket with V_0..V_m.
    Classical,
    /// Seed with the sum-of-squares drift and the columns, bracket with V_1..V_m.
    Reduced,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Mode::Classical),
            "reduced" => Ok(Mode::Reduced),
            _ => Err(Error::Invalid(format!("unknown mode '{s}'"))),
        }
    }
}

/// Spanning vectors generated up to some depth at one point.
#[derive(Clone, Debug, Serialize)]
pub struct BracketBasis {
    pub x: Vec<f64>,
    pub mode: Mode,
    pub tol: f64,
    pub cap: usize,
    /// Deepest level generated.
    pub depth: usize,
    pub words: Vec<BracketWord>,
    pub vectors: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Rank after each level 0..=depth.
    pub rank_by_depth: Vec<usize>,
    /// First depth with rank n, if reached.
    pub full_rank_depth: Option<usize>,
}

impl BracketBasis {
    /// In reduced mode `V0` in a word denotes the sum-of-squares drift.
    pub fn word_labels(&self) -> Vec<String> {
        self.words
            .iter()
            .map(|w| match self.mode {
                Mode::Classical => w.to_string(),
                Mode::Reduced => w.to_string().replace("V0", "W0"),
            })
            .collect()
    }
}

/// Singular values (descending) and numerical rank of the stacked vectors.
pub fn numerical_rank(vectors: &[Vec<f64>], n: usize, tol: f64) -> (Vec<f64>, usize) {
    if vectors.is_empty() {
        return (vec![0.0; n.min(1)], 0);
    }
    let m = DMatrix::from_fn(vectors.len(), n, |r, c| vectors[r][c]);
    let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = sv.first().cloned().unwrap_or(0.0);
    if smax == 0.0 || !smax.is_finite() {
        return (sv, 0);
    }
    let rank = sv.iter().filter(|&&s| s > tol * smax).count();
    (sv, rank)
}

fn jet_key(j: &[Jet]) -> Vec<f64> {
    j.iter().flat_map(|c| c.coeffs().iter().cloned()).collect()
}

fn same_up_to_sign(a: &[f64], b: &[f64]) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-13 * scale;
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol) || a.iter().zip(b).all(|(x, y)| (x + y).abs() <= tol)
}

/// Generate the bracket spaces H^0, H^1, ... at `x` until full rank or `cap`.
///
/// Words whose jets vanish identically or repeat an earlier jet (up to sign)
/// are dropped from the bracketing frontier; all other words stay, even if
/// their value at `x` is dependent, since their brackets may not be.
pub fn rank_recursion(fields: &VectorFieldSet, x: &[f64], mode: Mode, cap: usize, tol: f64) -> Result<BracketBasis> {
    let n = fields.dim();
    let m = fields.diffusion_count();
    let extra = usize::from(mode == Mode::Reduced);
    if cap + 1 > fields.order() {
        return Err(Error::OrderExhausted { needed: cap + 1, available: fields.order() });
    }
    if !fields.in_smooth_set(x) {
        return Err(Error::NonSmoothPoint(x.to_vec()));
    }
    let mut gens = fields.generator_jets(x, cap + extra)?;
    if mode == Mode::Reduced {
        gens[0] = reduced_drift_jet(&gens)?;
    }
    let seeds: Vec<usize> = match mode {
        Mode::Classical => (1..=m).collect(),
        Mode::Reduced => (0..=m).collect(),
    };
    let bracketing: Vec<usize> = match mode {
        Mode::Classical => (0..=m).collect(),
        Mode::Reduced => (1..=m).collect(),
    };
    let mut seen: Vec<Vec<f64>> = Vec::new();
    let mut frontier: Vec<(BracketWord, Vec<Jet>)> = Vec::new();
    let mut words = Vec::new();
    let mut vectors = Vec::new();
    for &i in &seeds {
        let j = gens[i].clone();
        words.push(BracketWord::leaf(i));
        vectors.push(values(&j));
        if !j.iter().all(|c| c.is_zero(0.0)) {
            seen.push(jet_key(&j));
            frontier.push((BracketWord::leaf(i), j));
        }
    }
    let (mut sv, mut rank) = numerical_rank(&vectors, n, tol);
    let mut rank_by_depth = vec![rank];
    let mut full = if rank == n { Some(0) } else { None };
    let mut depth = 0;
    while full.is_none() && depth < cap {
        depth += 1;
        let mut next = Vec::new();
        for &g in &bracketing {
            for (w, fj) in &frontier {
                let b = bracket_jets(&gens[g], fj)?;
                let word = BracketWord::bracket(BracketWord::leaf(g), w.clone());
                words.push(word.clone());
                vectors.push(values(&b));
                if b.iter().all(|c| c.is_zero(0.0)) {
                    continue;
                }
                let key = jet_key(&b);
                if seen.iter().any(|s| same_up_to_sign(s, &key)) {
                    continue;
                }
                seen.push(key);
                next.push((word, b));
            }
        }
        frontier = next;
        let r = numerical_rank(&vectors, n, tol);
        sv = r.0;
        rank = r.1;
        rank_by_depth.push(rank);
        if rank == n {
            full = Some(depth);
        }
        if frontier.is_empty() {
            break;
        }
    }
    Ok(BracketBasis {
        x: x.to_vec(),
        mode,
        tol,
        cap,
        depth,
        words,
        vectors,
        singular_values: sv,
        rank,
        rank_by_depth,
        full_rank_depth: full,
    })
}

/// How probe points are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Halton,
    Uniform { seed: u64 },
}

/// Per-point verdicts over a sample set.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionReport {
    pub mode: Mode,
    pub tol: f64,
    pub cap: usize,
    pub points: Vec<Vec<f64>>,
    /// Depth at full rank, `None` when the cap was reached first.
    pub depths: Vec<Option<usize>>,
    pub ranks: Vec<usize>,
    /// Points on the non-smooth set that were skipped.
    pub skipped: usize,
    pub fraction: f64,
    /// histogram[d] = number of points reaching full rank at depth d.
    pub histogram: Vec<usize>,
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, b: u32) -> f64 {
    let b = b as u64;
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// Points in the box; Halton uses indices 1..=count.
pub fn sample_points(domain: &BoxDomain, count: usize, sampling: Sampling) -> Result<Vec<Vec<f64>>> {
    let n = domain.dim();
    if n > PRIMES.len() {
        return Err(Error::Invalid("Halton sampling supports at most 16 dimensions".into()));
    }
    if domain.lo.iter().chain(&domain.hi).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("sampling box must be finite".into()));
    }
    let map = |u: f64, d: usize| domain.lo[d] + (domain.hi[d] - domain.lo[d]) * u;
    Ok(match sampling {
        Sampling::Halton => (1..=count as u64)
            .map(|i| (0..n).map(|d| map(radical_inverse(i, PRIMES[d]), d)).collect())
            .collect(),
        Sampling::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|_| (0..n).map(|d| map(rng.random::<f64>(), d)).collect()).collect()
        }
    })
}

/// Rank recursion at given points (non-smooth points skipped).
pub fn condition_report(
    fields: &VectorFieldSet,
    points: Vec<Vec<f64>>,
    mode: Mode,
    cap: usize,
    tol: f64,
) -> Result<ConditionReport> {
    let res: Vec<Result<Option<BracketBasis>>> = points
        .par_iter()
        .map(|p| {
            if !fields.in_smooth_set(p) {
                return Ok(None);
            }
            rank_recursion(fields, p, mode, cap, tol).map(Some)
        })
        .collect();
    let mut depths = Vec::with_capacity(points.len());
    let mut ranks = Vec::with_capacity(points.len());
    let mut skipped = 0;
    let mut histogram = vec![0usize; cap + 1];
    for r in res {
        match r? {
            Some(b) => {
                if let Some(d) = b.full_rank_depth {
                    histogram[d] += 1;
                }
                depths.push(b.full_rank_depth);
                ranks.push(b.rank);
            }
            None => {
                skipped += 1;
                depths.push(None);
                ranks.push(0);
            }
        }
    }
    let evaluated = points.len() - skipped;
    let full = histogram.iter().sum::<usize>();
    let fraction = if evaluated == 0 { 0.0 } else { full as f64 / evaluated as f64 };
    Ok(ConditionReport { mode, tol, cap, points, depths, ranks, skipped, fraction, histogram })
}

/// Full-rank fraction over sampled points of the box (non-smooth points skipped).
pub fn weak_condition_probe(
    fields: &VectorFieldSet,
    domain: &BoxDomain,
    samples: usize,
    sampling: Sampling,
    mode: Mode,
    cap: usize,
    tol: f64,
) -> Result<ConditionReport> {
    if samples == 0 {
        return Err(Error::Invalid("samples must be at least 1".into()));
    }
    let points = sample_points(domain, samples, sampling)?;
    condition_report(fields, points, mode, cap, tol)
}

/// Depth at full rank per grid node (`None` when not reached or non-smooth).
pub fn degeneracy_depth_map(
    fields: &VectorFieldSet,
    grid: &TensorGrid,
    mode: Mode,
    cap: usize,
    tol: f64,
) -> Result<Vec<Option<usize>>> {
    Ok(condition_report(fields, grid.points(), mode, cap, tol)?.depths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin;
    use std::collections::BTreeMap;

    fn model(name: &str) -> VectorFieldSet {
        builtin(name, &BTreeMap::new()).unwrap().fields
    }

    #[test]
    fn kolmogorov_depth_one() {
        let f = model("kolmogorov");
        let b = rank_recursion(&f, &[0.3, -0.7], Mode::Classical, 3, DEFAULT_TOL).unwrap();
        assert_eq!(b.full_rank_depth, Some(1));
        assert_eq!(b.rank_by_depth, vec![1, 2]);
        let r = rank_recursion(&f, &[0.3, -0.7], Mode::Reduced, 3, DEFAULT_TOL).unwrap();
        assert_eq!(r.full_rank_depth, None);
    }

    #[test]
    fn grushin_line() {
        let f = model("grushin");
        let on = rank_recursion(&f, &[0.0, 0.4], Mode::Classical, 3, DEFAULT_TOL).unwrap();
        assert_eq!(on.rank_by_depth, vec![1, 2]);
        let off = rank_recursion(&f, &[0.2, 0.4], Mode::Classical, 3, DEFAULT_TOL).unwrap();
        assert_eq!(off.full_rank_depth, Some(0));
        let red = rank_recursion(&f, &[0.0, 0.4], Mode::Reduced, 3, DEFAULT_TOL).unwrap();
        assert_eq!(red.full_rank_depth, Some(1));
    }

    #[test]
    fn stored_vectors_recheck() {
        let f = model("grushin");
        let b = rank_recursion(&f, &[0.0, 0.1], Mode::Classical, 2, DEFAULT_TOL).unwrap();
        for (w, v) in b.words.iter().zip(&b.vectors) {
            assert_eq!(&f.evaluate_word(w, &b.x).unwrap(), v);
        }
    }

    #[test]
    fn cap_needs_order() {
        let f = model("kolmogorov");
        assert!(matches!(
            rank_recursion(&f, &[0.0, 0.0], Mode::Classical, 4, DEFAULT_TOL),
            Err(Error::OrderExhausted { .. })
        ));
    }

    #[test]
    fn halton_is_deterministic_and_in_box() {
        let d = BoxDomain::cube(2, -1.0, 1.0);
        let a = sample_points(&d, 50, Sampling::Halton).unwrap();
        assert_eq!(a, sample_points(&d, 50, Sampling::Halton).unwrap());
        assert!(a.iter().all(|p| d.contains(p)));
        assert_eq!(a[0], vec![0.0, -1.0 + 2.0 / 3.0]);
    }
}
