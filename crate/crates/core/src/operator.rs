//! Grid realization of `L(t)u = 1/2 Tr(Q Q^T D^2 u) + <M x + c, D u>` with
//! the finite differences of [`crate::grid`].

use crate::coefficients::CoefficientSet;
use crate::grid::{gradient, hessian, GridFunction};

/// `L(t)u` at every node; masked-out nodes receive 0.
pub fn apply_operator(coeffs: &CoefficientSet, t: f64, u: &GridFunction) -> GridFunction {
    let d = u.dim();
    let a = coeffs.diffusion(t);
    let m = coeffs.m(t);
    let c = coeffs.c(t);
    let grad = gradient(u);
    let hess = hessian(u);
    let mut out = u.clone();
    for k in 0..u.values.len() {
        if !u.inside(k) {
            out.values[k] = 0.0;
            continue;
        }
        let x = u.grid.point(k);
        let mut v = 0.0;
        for i in 0..d {
            let b = (0..d).map(|j| m[(i, j)] * x[j]).sum::<f64>() + c[i];
            v += b * grad[i].values[k];
            for j in 0..d {
                v += a[(i, j)] * hess[i * d + j].values[k];
            }
        }
        out.values[k] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Affine;
    use crate::grid::Grid;
    use nalgebra::DMatrix;

    #[test]
    fn quadratic_in_rotation_field() {
        // u = x^2: Lu = 1 + <Jx, (2x, 0)> = 1 - 2 x y
        let coeffs = crate::coefficients::CoefficientSet::rotation(Affine::constant(1.0), 1.0).unwrap();
        let g = Grid::with_spacing(-1.0, 1.0, 0.125, 2).unwrap();
        let u = GridFunction::from_fn(&g, |x| x[0] * x[0]);
        let lu = apply_operator(&coeffs, 0.3, &u);
        for (k, p) in g.points().enumerate() {
            assert!((lu.values[k] - (1.0 - 2.0 * p[0] * p[1])).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn scalar_drift() {
        let coeffs = CoefficientSet::scalar_commuting(Affine::constant(2.0), DMatrix::identity(1, 1), 1.0).unwrap();
        let g = Grid::with_spacing(-1.0, 1.0, 0.125, 1).unwrap();
        let u = GridFunction::from_fn(&g, |x| x[0]);
        let lu = apply_operator(&coeffs, 0.0, &u);
        for (k, p) in g.points().enumerate() {
            assert!((lu.values[k] - 2.0 * p[0]).abs() < 1e-12);
        }
    }
}
