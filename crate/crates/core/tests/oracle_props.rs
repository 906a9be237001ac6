use std::collections::BTreeMap;
use std::sync::Arc;

use hypokernel::fields::{builtin, builtin_names, VectorFieldSet};
use hypokernel::grid::TensorGrid;
use hypokernel::oracle::{euler_maruyama, kde_density, linear_kernel_for, linear_parts, weak_order_linear, Bandwidth, SdeSpec};
use proptest::prelude::*;

fn model(name: &str, params: &[(&str, f64)]) -> Arc<VectorFieldSet> {
    let p: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Arc::new(builtin(name, &p).unwrap().fields)
}

fn start(n: usize) -> Vec<f64> {
    if n == 2 {
        vec![0.0, 1.0]
    } else {
        vec![0.0; n]
    }
}

#[test]
fn em_is_independent_of_the_thread_count() {
    let spec = SdeSpec { fields: model("weak_lipschitz", &[]), x: vec![0.0, 1.0], t: 0.5, steps: 50, paths: 20_000, seed: 7 };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| euler_maruyama(&spec).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.points.len(), b.points.len());
    assert!(a.points.iter().zip(&b.points).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn kde_mass_for_every_builtin() {
    for name in builtin_names() {
        let f = model(name, &[]);
        let x = start(f.dim());
        let grid = TensorGrid::parse(if f.dim() == 2 { "-4:4:81,-3:5:81" } else { "-4:4:161" }).unwrap();
        let s = euler_maruyama(&SdeSpec { fields: f, x: x.clone(), t: 0.25, steps: 50, paths: 100_000, seed: 3 }).unwrap();
        let d = kde_density(&s, &grid, Bandwidth::Scott, name, &x, 0.25).unwrap();
        let m = d.mass();
        assert!((0.97..=1.01).contains(&m), "{name}: mass {m}");
        assert!(d.min() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn em_moments_converge_at_first_order(mu in 0.2..2.0f64, l2 in 0.2..2.0f64, t in 0.1..1.0f64, x in [-1.0..1.0f64, -1.0..1.0f64]) {
        let f = model("kolmogorov", &[("mu1", mu), ("lambda2", l2)]);
        let (b, a) = linear_parts(f.as_ref(), &x).unwrap();
        let w = weak_order_linear(&b, &a, &x, t, &[25, 50, 100, 200]).unwrap();
        prop_assert!(w.slope >= 0.8, "slope {} errors {:?}", w.slope, w.errors);
    }

    #[test]
    fn kolmogorov_covariance_is_nondegenerate(mu in 0.1..3.0f64, l2 in 0.1..3.0f64, t in 1e-3..2.0f64) {
        let f = model("kolmogorov", &[("mu1", mu), ("lambda2", l2)]);
        let k = linear_kernel_for(f.as_ref(), &[0.0, 0.0], t).unwrap();
        // 2 lambda2 t and (2/3) mu1^2 lambda2 t^3 on the diagonal
        let want = (2.0 * l2 * t) * (2.0 / 3.0 * mu * mu * l2 * t.powi(3)) - (mu * l2 * t * t).powi(2);
        prop_assert!(k.det() > 0.0);
        prop_assert!((k.det() - want).abs() <= 1e-8 * want, "det {} want {}", k.det(), want);
    }
}
