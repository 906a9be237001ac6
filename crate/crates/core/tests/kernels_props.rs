use hypokernel::fields::Coefficients;
use hypokernel::kernels::{eigendecompose, frozen_gaussian_from};
use hypokernel::parametrix::pde_residual;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Symmetric positive definite 2x2 from a Cholesky factor.
fn spd() -> impl Strategy<Value = DMatrix<f64>> {
    (0.4..1.5f64, -0.5..0.5f64, 0.4..1.5f64).prop_map(|(a, b, c)| {
        let l = DMatrix::from_row_slice(2, 2, &[a, 0.0, b, c]);
        &l * l.transpose()
    })
}

fn rotation(th: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()])
}

struct Constant(DMatrix<f64>);

impl Coefficients for Constant {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn diffusion(&self, _x: &[f64], a: &mut [f64]) {
        let n = self.dim();
        for k in 0..n * n {
            a[k] = self.0[(k / n, k % n)];
        }
    }
    fn drift(&self, _x: &[f64], v: &mut [f64]) {
        v.fill(0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotational_covariance(a in spd(), th in 0.0..6.28f64, t in 0.05..1.0f64, z in [-1.5..1.5f64, -1.5..1.5f64]) {
        let o = rotation(th);
        let y = [0.3, -0.2];
        let g = frozen_gaussian_from(&a, &y).unwrap();
        let ra = &o * &a * o.transpose();
        let ry = &o * DMatrix::from_column_slice(2, 1, &y);
        let gr = frozen_gaussian_from(&ra, ry.as_slice()).unwrap();
        let x = [y[0] + z[0], y[1] + z[1]];
        let rx = &o * DMatrix::from_column_slice(2, 1, &x);
        let p = g.value(t, &x, 0.0).unwrap();
        let q = gr.value(t, rx.as_slice(), 0.0).unwrap();
        prop_assert!((p - q).abs() <= 1e-10 * (1.0 + p));
    }

    #[test]
    fn depends_on_difference_only(a in spd(), t in 0.05..1.0f64, y in [-2.0..2.0f64, -2.0..2.0f64], z in [-1.0..1.0f64, -1.0..1.0f64]) {
        let g0 = frozen_gaussian_from(&a, &[0.0, 0.0]).unwrap();
        let gy = frozen_gaussian_from(&a, &y).unwrap();
        let p = g0.value(t, &z, 0.0).unwrap();
        let q = gy.value(t, &[y[0] + z[0], y[1] + z[1]], 0.0).unwrap();
        prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p));
    }

    #[test]
    fn solves_the_frozen_equation(a in spd(), t in 0.1..1.0f64, z in [-1.0..1.0f64, -1.0..1.0f64]) {
        let g = frozen_gaussian_from(&a, &[0.0, 0.0]).unwrap();
        let peak = g.value(t, &[0.0, 0.0], 0.0).unwrap();
        let p = |tt: f64, x: &[f64]| g.value(tt, x, 0.0).unwrap();
        let r = pde_residual(&Constant(a.clone()), p, t, &z, 1e-3 * t.sqrt(), 1e-3 * t);
        prop_assert!(r.abs() <= 1e-4 * peak, "residual {} peak {}", r, peak);
    }

    #[test]
    fn eigendecomposition_reconstructs(a in spd()) {
        let e = eigendecompose(&a).unwrap();
        prop_assert!(e.lambda.windows(2).all(|w| w[0] >= w[1]));
        let d = &e.d;
        let rec = d.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.lambda.clone())) * d;
        prop_assert!((rec - &a).amax() <= 1e-10);
        prop_assert!((d * d.transpose() - DMatrix::identity(2, 2)).amax() <= 1e-10);
    }
}
