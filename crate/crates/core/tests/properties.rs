use nalgebra::DMatrix;
use proptest::prelude::*;

use ou_evolve::coefficients::{Affine, CoefficientSet};
use ou_evolve::grid::{lp_norm, Grid, GridFunction};
use ou_evolve::propagator::PropagatorCache;

const ODE_TOL: f64 = 1e-10;
const HORIZON: f64 = 2.0;

fn families() -> Vec<PropagatorCache> {
    let gen = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]);
    [
        CoefficientSet::heat(1.0, 2).unwrap(),
        CoefficientSet::rotation(Affine { value: 0.7, slope: 1.3 }, 1.0).unwrap(),
        CoefficientSet::scalar_commuting(Affine { value: 1.0, slope: -0.4 }, gen, 0.8).unwrap(),
    ]
    .into_iter()
    .map(|c| PropagatorCache::new(c, ODE_TOL, 8).unwrap())
    .collect()
}

fn grid_function(values: &[f64]) -> GridFunction {
    let g = Grid::new(&[-1.0], &[1.0], &[values.len()]).unwrap();
    GridFunction::from_values(&g, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_norm_is_homogeneous(values in prop::collection::vec(-10.0f64..10.0, 16), alpha in -5.0f64..5.0, p in 1.0f64..6.0) {
        let f = grid_function(&values);
        let lhs = lp_norm(&f.scaled(alpha), p);
        let rhs = alpha.abs() * lp_norm(&f, p);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn lp_norm_obeys_the_triangle_inequality(
        a in prop::collection::vec(-10.0f64..10.0, 16),
        b in prop::collection::vec(-10.0f64..10.0, 16),
        p in 1.0f64..6.0,
    ) {
        let (f, g) = (grid_function(&a), grid_function(&b));
        let sum = lp_norm(&f.add(&g), p);
        prop_assert!(sum <= (lp_norm(&f, p) + lp_norm(&g, p)) * (1.0 + 1e-12));
    }

    #[test]
    fn flow_is_a_cocycle(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
        let mut v = [x * HORIZON, y * HORIZON, z * HORIZON];
        v.sort_by(f64::total_cmp);
        let [s, r, t] = v;
        for cache in families() {
            let direct = cache.flow_u(t, s).unwrap();
            let composed = cache.flow_u(t, r).unwrap() * cache.flow_u(r, s).unwrap();
            prop_assert!((direct - composed).norm() <= 10.0 * ODE_TOL * HORIZON);
        }
    }

    #[test]
    fn flow_inverse_is_consistent(x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let (s, t) = ((x * HORIZON).min(y * HORIZON), (x * HORIZON).max(y * HORIZON));
        for cache in families() {
            let d = cache.dim();
            let prod = cache.flow_u(t, s).unwrap() * cache.flow_u(s, t).unwrap();
            prop_assert!((prod - DMatrix::identity(d, d)).norm() <= 10.0 * ODE_TOL * HORIZON);
        }
    }

    #[test]
    fn covariance_grows_in_loewner_order(x in 0.0f64..1.0, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let s = x;
        let (t1, t2) = (s + a.min(b), s + a.max(b) + 1e-3);
        for cache in families() {
            let q1 = cache.covariance_q(t1, s).unwrap().q_ts.clone();
            let q2 = cache.covariance_q(t2, s).unwrap().q_ts.clone();
            let diff = &q2 - &q1;
            let sym = (&diff + diff.transpose()) * 0.5;
            prop_assert!(sym.symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn coefficients_are_deterministic(t in 0.0f64..5.0) {
        for cache in families() {
            let c = cache.coeffs();
            prop_assert_eq!(c.q(t), c.q(t));
            prop_assert_eq!(c.m(t), c.m(t));
            prop_assert_eq!(c.c(t), c.c(t));
        }
    }
}
