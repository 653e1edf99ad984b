//! Gauss–Legendre rules and the panel-doubling driver used for the
//! propagator integrals.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// nodes in increasing order.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let x = self.nodes.iter().map(|&u| mid + half * u).collect();
        let w = self.weights.iter().map(|&w| half * w).collect();
        (x, w)
    }

    /// Composite rule with `panels` equal panels on `[a, b]`; nodes increasing.
    pub fn composite(&self, a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
        let width = (b - a) / panels as f64;
        let mut xs = Vec::with_capacity(panels * self.len());
        let mut ws = Vec::with_capacity(panels * self.len());
        for p in 0..panels {
            let lo = a + width * p as f64;
            let hi = if p + 1 == panels { b } else { lo + width };
            let (x, w) = self.mapped(lo, hi);
            xs.extend(x);
            ws.extend(w);
        }
        (xs, ws)
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let (x, w) = self.mapped(a, b);
        x.iter().zip(&w).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureInfo {
    pub panels: usize,
    pub residual: f64,
}

/// Composite Gauss–Legendre of a matrix-valued integrand on `[a, b]`, doubling
/// the panel count until two successive values agree to `rel_tol` (relative to
/// the larger Frobenius norm, absolute when the integral vanishes).
///
/// `eval` receives the increasing node list of one composite rule and returns
/// the integrand at each node.
pub fn adaptive_matrix<F>(
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    rel_tol: f64,
    max_panels: usize,
    mut eval: F,
) -> Result<(DMatrix<f64>, QuadratureInfo)>
where
    F: FnMut(&[f64]) -> Result<Vec<DMatrix<f64>>>,
{
    let mut apply = |panels: usize| -> Result<DMatrix<f64>> {
        let (x, w) = rule.composite(a, b, panels);
        let values = eval(&x)?;
        let mut acc = values[0].clone() * 0.0;
        for (v, w) in values.iter().zip(&w) {
            acc += v * *w;
        }
        Ok(acc)
    };
    let mut panels = 1;
    let mut prev = apply(panels)?;
    loop {
        let next_panels = panels * 2;
        let next = apply(next_panels)?;
        let scale = next.norm().max(prev.norm());
        let diff = (&next - &prev).norm();
        let residual = if scale > 0.0 { diff / scale } else { 0.0 };
        if residual < rel_tol || diff < 1e-300 {
            return Ok((next, QuadratureInfo { panels: next_panels, residual }));
        }
        if next_panels >= max_panels {
            return Err(Error::ToleranceNotMet { achieved: residual, target: rel_tol });
        }
        panels = next_panels;
        prev = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two_and_integrate_polynomials() {
        for n in 1..=20 {
            let rule = GaussLegendre::new(n);
            let s: f64 = rule.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}");
            // exact for degree 2n-1
            let deg = 2 * n - 1;
            let got = rule.integrate(0.0, 1.0, |x| x.powi(deg as i32));
            assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let rule = GaussLegendre::new(7);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        for i in 0..7 {
            assert!((rule.nodes[i] + rule.nodes[6 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptive_matrix_exponential() {
        let rule = GaussLegendre::new(4);
        let (v, info) = adaptive_matrix(&rule, 0.0, 1.0, 1e-12, 1 << 12, |xs| {
            Ok(xs.iter().map(|&x| DMatrix::from_element(1, 1, (2.0 * x).exp())).collect())
        })
        .unwrap();
        let exact = ((2.0f64).exp() - 1.0) / 2.0;
        assert!((v[(0, 0)] - exact).abs() < 1e-12 * exact);
        assert!(info.residual < 1e-12);
    }

    #[test]
    fn adaptive_reports_cap() {
        let rule = GaussLegendre::new(2);
        let err = adaptive_matrix(&rule, 0.0, 1.0, 1e-15, 4, |xs| {
            Ok(xs.iter().map(|&x| DMatrix::from_element(1, 1, x.sqrt())).collect())
        })
        .unwrap_err();
        assert!(matches!(err, Error::ToleranceNotMet { .. }));
    }
}
