use std::collections::BTreeMap;
use std::sync::Arc;

use hypokernel::estimates::{
    coefficient_distance, derivative_grid, fit_envelope, lipschitz_estimate, DerivOrder, EnvelopeLattice, FdSteps,
    Mollified,
};
use hypokernel::fields::{builtin, Coefficients};
use hypokernel::grid::{DensityGrid, TensorGrid};
use hypokernel::kernels::frozen_gaussian_from;
use hypokernel::splitting::{trotter_density, TrotterScheme};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian_source(a: f64, g: TensorGrid) -> impl Fn(f64, &[f64]) -> hypokernel::Result<DensityGrid> + Sync {
    move |t: f64, y: &[f64]| frozen_gaussian_from(&DMatrix::from_element(1, 1, a), y)?.on_grid(t, 0.0, &g, "gaussian")
}

fn weak() -> Arc<dyn Coefficients> {
    Arc::new(builtin("weak_lipschitz", &BTreeMap::new()).unwrap().fields)
}

/// Every sample is rechecked against the fitted bound.
fn dominated(fam: &[DensityGrid], fit: &hypokernel::estimates::EnvelopeFit) -> bool {
    fam.iter().all(|d| {
        d.grid.points().iter().zip(&d.values).all(|(x, v)| v.abs() <= fit.bound(d.t, x, &d.y) * (1.0 + 1e-12))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fitted_envelopes_dominate(a in 0.3..2.0f64, j in 0..=1usize, al in 0..=2usize, be in 0..=1usize) {
        let src = gaussian_source(a, TensorGrid::parse("-6:6:241").unwrap());
        let o = DerivOrder::new(j, vec![al], vec![be]);
        let fam: Vec<DensityGrid> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&t| derivative_grid(&src, t, &[0.0], &o, FdSteps { ht: 1e-3, hy: 1e-2 }).unwrap())
            .collect();
        let fit = fit_envelope(&fam, &o, &EnvelopeLattice::default()).unwrap();
        prop_assert!(fit.passes());
        prop_assert!(dominated(&fam, &fit));
    }

    #[test]
    fn mollifier_weights_are_normalized(scale in 1..40usize, points in 2..12usize, x in -3.0..3.0f64, c in 0.5..2.0f64) {
        let m = Mollified::new(weak(), scale, points).unwrap();
        prop_assert!((m.weight_sum() - 1.0).abs() <= 1e-10);
        // constants are fixed points: sigma_1 = (0, 1) is constant
        let mut a = [0.0; 4];
        m.diffusion(&[x, c], &mut a);
        prop_assert!((a[3] - 1.0).abs() <= 1e-12 && a[0].abs() <= 1e-15);
    }

    #[test]
    fn mollification_error_is_within_lipschitz_radius(scale in 2..20usize) {
        let base = weak();
        let m = Mollified::new(base.clone(), scale, 8).unwrap();
        let pts: Vec<Vec<f64>> = (0..41).map(|k| vec![0.3, -2.0 + 0.1 * k as f64]).collect();
        let lip = lipschitz_estimate(base.as_ref(), &pts, 1e-4);
        let dist = coefficient_distance(base.as_ref(), &m, &pts);
        prop_assert!(dist <= lip * m.radius * (1.0 + 1e-9), "dist {} lip {} radius {}", dist, lip, m.radius);
    }
}

#[test]
fn time_differences_are_second_order() {
    let g = TensorGrid::parse("-4:4:81").unwrap();
    let src = gaussian_source(1.0, g.clone());
    let t = 0.3;
    let exact: Vec<f64> = g
        .points()
        .iter()
        .map(|x| {
            let p = (4.0 * std::f64::consts::PI * t).powf(-0.5) * (-x[0] * x[0] / (4.0 * t)).exp();
            p * (x[0] * x[0] / (4.0 * t * t) - 0.5 / t)
        })
        .collect();
    let err = |ht: f64| {
        let d = derivative_grid(&src, t, &[0.0], &DerivOrder::new(1, vec![0], vec![0]), FdSteps { ht, hy: 1e-2 }).unwrap();
        d.values.iter().zip(&exact).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(2e-2), err(1e-2));
    let order = (e1 / e2).log2();
    assert!(order >= 1.8, "errors {e1:.3e} {e2:.3e} order {order:.2}");
}

#[test]
fn weak_model_bounds_on_a_subset_of_orders() {
    let grid = TensorGrid::parse("-1.5:2.5:161,-4:6:81").unwrap();
    let src = |t: f64, y: &[f64]| {
        let s = TrotterScheme::new(weak(), y, &[1], grid.clone())?.with_substeps(32)?;
        trotter_density(&s, "weak_lipschitz", t)
    };
    let y = [0.0, 1.0];
    let orders = [
        DerivOrder::zero(2),
        DerivOrder::new(0, vec![1, 0], vec![0, 0]),
        DerivOrder::new(0, vec![0, 1], vec![0, 0]),
        DerivOrder::new(0, vec![0, 2], vec![0, 0]),
        DerivOrder::new(1, vec![0, 0], vec![0, 0]),
        DerivOrder::new(0, vec![0, 0], vec![0, 1]),
    ];
    let mut failed = Vec::new();
    for o in &orders {
        let fam: Vec<DensityGrid> = [0.125, 0.25, 0.5]
            .iter()
            .map(|&t| derivative_grid(&src, t, &y, o, FdSteps { ht: 1e-2, hy: 5e-2 }).unwrap())
            .collect();
        let fit = fit_envelope(&fam, o, &EnvelopeLattice::default()).unwrap();
        if !(fit.passes() && dominated(&fam, &fit)) {
            failed.push(o.triple());
        }
    }
    assert!(failed.is_empty(), "orders without a valid envelope: {failed:?}");
}
