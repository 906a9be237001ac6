use std::collections::BTreeMap;
use std::sync::Arc;

use hypokernel::fields::{builtin, VectorFieldSet};
use hypokernel::grid::{DensityGrid, TensorGrid};
use hypokernel::oracle::linear_kernel_for;
use hypokernel::splitting::{flow_map, second_difference_max, trotter_density, TrotterScheme};
use proptest::prelude::*;

const GRID: &str = "-1.5:2.5:161,-4:6:81";

fn model(name: &str) -> Arc<VectorFieldSet> {
    Arc::new(builtin(name, &BTreeMap::new()).unwrap().fields)
}

fn trotter(name: &str, t: f64, m: usize) -> DensityGrid {
    let s = TrotterScheme::new(model(name), &[0.0, 1.0], &[1], TensorGrid::parse(GRID).unwrap())
        .unwrap()
        .with_substeps(m)
        .unwrap();
    trotter_density(&s, name, t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_is_a_semigroup(
        b in [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64],
        c in -0.5..0.5f64,
        s in 0.0..1.0f64,
        t in 0.0..1.0f64,
        x in [-2.0..2.0f64, -2.0..2.0f64],
    ) {
        // linear part plus a mild quadratic term
        let drift = |z: &[f64], o: &mut [f64]| {
            o[0] = b[0] * z[0] + b[1] * z[1] + c * z[1] * z[1];
            o[1] = b[2] * z[0] + b[3] * z[1];
        };
        let whole = flow_map(drift, s + t, &x, 400).unwrap();
        let mid = flow_map(drift, s, &x, 200).unwrap();
        let split = flow_map(drift, t, &mid, 200).unwrap();
        let back = flow_map(drift, -(s + t), &whole, 400).unwrap();
        for k in 0..2 {
            prop_assert!((whole[k] - split[k]).abs() <= 1e-8 * (1.0 + whole[k].abs()));
            prop_assert!((back[k] - x[k]).abs() <= 1e-8 * (1.0 + x[k].abs()));
        }
    }
}

#[test]
fn trotter_error_decreases_with_substeps() {
    let grid = TensorGrid::parse(GRID).unwrap();
    let exact = linear_kernel_for(model("kolmogorov").as_ref(), &[0.0, 1.0], 0.5)
        .unwrap()
        .on_grid(&grid, "kolmogorov", &[0.0, 1.0])
        .unwrap();
    let tv: Vec<f64> = [8, 16, 32, 64].iter().map(|&m| trotter("kolmogorov", 0.5, m).tv_distance(&exact).unwrap()).collect();
    // allow one violation of at most 10%
    let bad: Vec<usize> = (1..tv.len()).filter(|&k| tv[k] > tv[k - 1]).collect();
    assert!(bad.len() <= 1 && bad.iter().all(|&k| tv[k] <= 1.1 * tv[k - 1]), "tv {tv:?}");
}

#[test]
fn densities_stay_nonnegative() {
    for name in ["kolmogorov", "weak_lipschitz"] {
        for t in [0.125, 0.5] {
            let g = trotter(name, t, 32);
            assert!(g.min() >= -1e-8, "{name} t {t} min {}", g.min());
            assert!((g.mass() - 1.0).abs() <= 1e-6, "{name} t {t} mass {}", g.mass());
        }
    }
}

#[test]
fn short_times_are_rougher() {
    let late = second_difference_max(&trotter("kolmogorov", 0.5, 64));
    let early = second_difference_max(&trotter("kolmogorov", 0.25, 64));
    for d in 0..2 {
        assert!(early[d] / late[d] > 1.0, "axis {d}: {early:?} vs {late:?}");
    }
}
