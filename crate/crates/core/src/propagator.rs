//! The matrix evolution family `U(t, s)` and the derived kernel data.
//!
//! `U(t, s)` solves `d/dt U(t, s) = -M(t) U(t, s)`, `U(s, s) = I`. For
//! `a < b` the reversed flow `U(a, b) = U(b, a)^{-1}` is integrated directly
//! from `d/dtau V = V M(tau)`, `V(a) = I`, which is what the drift and
//! covariance integrals consume:
//!
//! ```text
//! g(t, s)   = int_s^t U(s, r) c(r) dr
//! Q_{t, s}  = int_s^t U(s, r) Q(r) Q(r)^T U(s, r)^T dr
//! ```

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::quadrature::{adaptive_matrix, GaussLegendre};

const MAX_SUBSTEP: f64 = 0.05;

/// Frozen `(t, s)` slice of the Gaussian kernel.
#[derive(Clone, Debug)]
pub struct KernelParams {
    pub t: f64,
    pub s: f64,
    /// `U(s, t)`, the affine pullback matrix.
    pub u_st: DMatrix<f64>,
    pub g_ts: DVector<f64>,
    pub q_ts: DMatrix<f64>,
    /// Lower triangular, `chol chol^T = q_ts`.
    pub chol: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub logdet: f64,
    pub eig_min: f64,
    pub eig_max: f64,
}

impl KernelParams {
    pub fn dim(&self) -> usize {
        self.q_ts.nrows()
    }

    /// Largest standard deviation of the kernel.
    pub fn sigma_max(&self) -> f64 {
        self.eig_max.sqrt()
    }

    pub fn sigma_min(&self) -> f64 {
        self.eig_min.sqrt()
    }

    /// `||Q_{t,s}^{-1/2}||_2`.
    pub fn inv_sqrt_norm(&self) -> f64 {
        1.0 / self.eig_min.sqrt()
    }

    /// `(det Q_{t,s})^{1/2}`.
    pub fn sqrt_det(&self) -> f64 {
        (0.5 * self.logdet).exp()
    }

    /// Builds the factorized parameters from a covariance, symmetrizing first.
    pub fn from_parts(t: f64, s: f64, u_st: DMatrix<f64>, g_ts: DVector<f64>, q_raw: DMatrix<f64>) -> Result<Self> {
        let q_ts = (&q_raw + q_raw.transpose()) * 0.5;
        let eig = q_ts.clone().symmetric_eigen();
        let eig_min = eig.eigenvalues.min();
        let eig_max = eig.eigenvalues.max();
        let chol = match q_ts.clone().cholesky() {
            Some(c) if eig_min > 0.0 => c,
            _ => return Err(Error::DegenerateCovariance { min_eigenvalue: eig_min }),
        };
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let q_inv = chol.inverse();
        Ok(KernelParams { t, s, u_st, g_ts, q_ts, chol: l, q_inv, logdet, eig_min, eig_max })
    }
}

/// Memoizing evaluator for `U`, `g` and `Q_{t,s}`.
pub struct PropagatorCache {
    coeffs: CoefficientSet,
    ode_tol: f64,
    rule: GaussLegendre,
    quad_tol: f64,
    max_panels: usize,
    flows: RwLock<HashMap<(u64, u64), DMatrix<f64>>>,
    kernels: RwLock<HashMap<(u64, u64), Arc<KernelParams>>>,
}

impl PropagatorCache {
    pub fn new(coeffs: CoefficientSet, ode_tol: f64, quad_nodes: usize) -> Result<Self> {
        if !(ode_tol > 0.0) {
            return Err(Error::Config(format!("ode_tol must be positive, got {ode_tol}")));
        }
        if quad_nodes == 0 {
            return Err(Error::Config("quad_nodes must be positive".into()));
        }
        Ok(PropagatorCache {
            coeffs,
            ode_tol,
            rule: GaussLegendre::new(quad_nodes),
            quad_tol: 1e-10,
            max_panels: 1 << 12,
            flows: RwLock::new(HashMap::new()),
            kernels: RwLock::new(HashMap::new()),
        })
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn ode_tol(&self) -> f64 {
        self.ode_tol
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    fn substep(&self, a: f64, b: f64) -> f64 {
        let mid = 0.5 * (a + b);
        let scale = [a, mid, b].iter().map(|&t| self.coeffs.m(t).norm()).fold(1.0, f64::max);
        (self.ode_tol.powf(0.25) / scale).min(MAX_SUBSTEP)
    }

    /// `U(a, b)`.
    pub fn flow_u(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        if a < 0.0 || b < 0.0 {
            return Err(Error::Domain(format!("times must be non-negative, got ({a}, {b})")));
        }
        let d = self.dim();
        if a == b {
            return Ok(DMatrix::identity(d, d));
        }
        let key = (a.to_bits(), b.to_bits());
        if let Some(u) = self.flows.read().expect("flow memo poisoned").get(&key) {
            return Ok(u.clone());
        }
        let u = if a > b {
            self.integrate(b, &[a], Side::Left)?.pop().expect("one target")
        } else {
            self.integrate(a, &[b], Side::Right)?.pop().expect("one target")
        };
        self.flows.write().expect("flow memo poisoned").insert(key, u.clone());
        Ok(u)
    }

    /// `U(s, r)` for every `r` in the increasing list `rs`, all `>= s`, from a
    /// single sweep of the reversed-side ODE.
    pub fn reverse_flows(&self, s: f64, rs: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.integrate(s, rs, Side::Right)
    }

    /// RK4 sweep from `start` through the increasing `targets`.
    fn integrate(&self, start: f64, targets: &[f64], side: Side) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim();
        let mut v = DMatrix::<f64>::identity(d, d);
        let mut tau = start;
        let mut out = Vec::with_capacity(targets.len());
        let end = targets.last().copied().unwrap_or(start);
        let h_max = self.substep(start, end);
        for &target in targets {
            debug_assert!(target >= tau);
            let span = target - tau;
            if span > 0.0 {
                let n = (span / h_max).ceil().max(1.0) as usize;
                let h = span / n as f64;
                for k in 0..n {
                    let t0 = tau + h * k as f64;
                    v = self.rk4_step(&v, t0, h, side);
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Divergence { tau: t0 + h });
                    }
                }
                tau = target;
            }
            out.push(v.clone());
        }
        Ok(out)
    }

    fn rk4_step(&self, v: &DMatrix<f64>, t0: f64, h: f64, side: Side) -> DMatrix<f64> {
        let rhs = |t: f64, x: &DMatrix<f64>| -> DMatrix<f64> {
            let m = self.coeffs.m(t);
            match side {
                Side::Left => -(m * x),
                Side::Right => x * m,
            }
        };
        let k1 = rhs(t0, v);
        let k2 = rhs(t0 + 0.5 * h, &(v + &k1 * (0.5 * h)));
        let k3 = rhs(t0 + 0.5 * h, &(v + &k2 * (0.5 * h)));
        let k4 = rhs(t0 + h, &(v + &k3 * h));
        v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// `g(t, s) = int_s^t U(s, r) c(r) dr`.
    pub fn drift_g(&self, t: f64, s: f64) -> Result<DVector<f64>> {
        if t < s {
            return Err(Error::Domain(format!("drift_g needs t >= s, got ({t}, {s})")));
        }
        let d = self.dim();
        if t == s {
            return Ok(DVector::zeros(d));
        }
        let (g, _) = adaptive_matrix(&self.rule, s, t, self.quad_tol, self.max_panels, |rs| {
            let flows = self.reverse_flows(s, rs)?;
            rs.iter()
                .zip(flows)
                .map(|(&r, u)| {
                    let c = self.coeffs.try_c(r)?;
                    Ok(DMatrix::from_column_slice(d, 1, (u * c).as_slice()))
                })
                .collect()
        })?;
        Ok(DVector::from_column_slice(g.as_slice()))
    }

    /// Raw `Q_{t,s}` before symmetrization.
    pub fn covariance_raw(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let (q, _) = adaptive_matrix(&self.rule, s, t, self.quad_tol, self.max_panels, |rs| {
            let flows = self.reverse_flows(s, rs)?;
            rs.iter()
                .zip(flows)
                .map(|(&r, u)| {
                    let q = self.coeffs.try_q(r)?;
                    let uq = u * q;
                    Ok(&uq * uq.transpose())
                })
                .collect()
        })?;
        Ok(q)
    }

    /// Factorized kernel parameters for `t > s`, memoized by the exact bit
    /// patterns of `(t, s)`.
    pub fn covariance_q(&self, t: f64, s: f64) -> Result<Arc<KernelParams>> {
        if !(t > s) {
            return Err(Error::Domain(format!("covariance needs t > s, got ({t}, {s})")));
        }
        if s < 0.0 {
            return Err(Error::Domain(format!("times must be non-negative, got s = {s}")));
        }
        let key = (t.to_bits(), s.to_bits());
        if let Some(k) = self.kernels.read().expect("kernel memo poisoned").get(&key) {
            return Ok(Arc::clone(k));
        }
        let q = self.covariance_raw(t, s)?;
        let g = self.drift_g(t, s)?;
        let u_st = self.flow_u(s, t)?;
        let params = Arc::new(KernelParams::from_parts(t, s, u_st, g, q)?);
        self.kernels.write().expect("kernel memo poisoned").insert(key, Arc::clone(&params));
        Ok(params)
    }

    /// Empirical constants of the covariance bounds
    /// `||Q_{t,s}^{-1/2}|| <= C (t-s)^{-1/2}` and `det(Q_{t,s})^{1/2} >= C (t-s)^{d/2}`
    /// over log-spaced gaps in `[1e-4, horizon]`.
    pub fn estimate_constants(&self, horizon: f64, n_pairs: usize) -> Result<ConstantsReport> {
        if !(horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_pairs < 10 {
            return Err(Error::Domain("estimate_constants needs at least 10 pairs".into()));
        }
        let d = self.dim() as f64;
        let lo = 1e-4f64.min(horizon);
        let mut report = ConstantsReport { c_inv_sqrt: 0.0, c_det: f64::INFINITY, pairs: Vec::new() };
        for k in 0..n_pairs {
            let frac = k as f64 / (n_pairs - 1) as f64;
            let gap = (lo.ln() + frac * (horizon.ln() - lo.ln())).exp().min(horizon);
            let slack = horizon - gap;
            let s = match k % 3 {
                0 => 0.0,
                1 => 0.5 * slack,
                _ => slack,
            };
            let t = s + gap;
            let kp = self.covariance_q(t, s)?;
            let inv = gap.sqrt() * kp.inv_sqrt_norm();
            let det = gap.powf(-0.5 * d) * kp.sqrt_det();
            report.c_inv_sqrt = report.c_inv_sqrt.max(inv);
            report.c_det = report.c_det.min(det);
            report.pairs.push(ConstantSample { t, s, inv_sqrt: inv, det });
        }
        if !(report.c_inv_sqrt.is_finite() && report.c_det.is_finite() && report.c_det > 0.0) {
            return Err(Error::DegenerateCovariance { min_eigenvalue: 0.0 });
        }
        Ok(report)
    }
}

#[derive(Clone, Copy)]
enum Side {
    /// `V' = -M V`
    Left,
    /// `V' = V M`
    Right,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantSample {
    pub t: f64,
    pub s: f64,
    pub inv_sqrt: f64,
    pub det: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub c_inv_sqrt: f64,
    pub c_det: f64,
    pub pairs: Vec<ConstantSample>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Affine;
    use std::f64::consts::{E, FRAC_PI_2};

    fn scalar(m: f64) -> PropagatorCache {
        let c = CoefficientSet::scalar_commuting(Affine::constant(m), DMatrix::identity(1, 1), 1.0).unwrap();
        PropagatorCache::new(c, 1e-10, 8).unwrap()
    }

    fn rotation() -> PropagatorCache {
        PropagatorCache::new(CoefficientSet::rotation(Affine::constant(1.0), 1.0).unwrap(), 1e-10, 8).unwrap()
    }

    #[test]
    fn zero_drift_is_identity() {
        let p = PropagatorCache::new(CoefficientSet::heat(1.0, 2).unwrap(), 1e-10, 8).unwrap();
        for &(a, b) in &[(1.0, 0.0), (0.0, 1.0), (0.3, 0.3)] {
            assert_eq!(p.flow_u(a, b).unwrap(), DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn scalar_exponential() {
        let p = scalar(1.0);
        let u = p.flow_u(0.5, 0.0).unwrap()[(0, 0)];
        assert!((u - (-0.5f64).exp()).abs() < 1e-12);
        assert!((u - 0.606531).abs() < 1e-6);
        let back = p.flow_u(0.0, 0.5).unwrap()[(0, 0)];
        assert!((back - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn rotation_quarter_turn() {
        let p = rotation();
        let u = p.flow_u(FRAC_PI_2, 0.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((u - expected).norm() < 1e-10);
    }

    #[test]
    fn drift_integrals() {
        let p = PropagatorCache::new(CoefficientSet::heat(1.0, 1).unwrap(), 1e-10, 8).unwrap();
        assert_eq!(p.drift_g(1.0, 0.0).unwrap()[0], 0.0);

        let drifted = CoefficientSet::heat(1.0, 2)
            .unwrap()
            .with_drift(DVector::from_vec(vec![1.0, 0.0]), DVector::zeros(2))
            .unwrap();
        let p = PropagatorCache::new(drifted, 1e-10, 8).unwrap();
        let g = p.drift_g(2.5, 0.5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && g[1].abs() < 1e-14);

        let c = CoefficientSet::scalar_commuting(Affine::constant(1.0), DMatrix::identity(1, 1), 1.0)
            .unwrap()
            .with_drift(DVector::from_vec(vec![1.0]), DVector::zeros(1))
            .unwrap();
        let p = PropagatorCache::new(c, 1e-10, 8).unwrap();
        let g = p.drift_g(1.0, 0.0).unwrap()[0];
        assert!((g - (E - 1.0)).abs() < 1e-9, "{g}");
    }

    #[test]
    fn covariance_closed_forms() {
        let heat = PropagatorCache::new(CoefficientSet::heat(1.0, 1).unwrap(), 1e-10, 8).unwrap();
        let k = heat.covariance_q(1.5, 0.5).unwrap();
        assert!((k.q_ts[(0, 0)] - 1.0).abs() < 1e-13);

        let rot = rotation();
        let k = rot.covariance_q(0.75, 0.5).unwrap();
        assert!((&k.q_ts - DMatrix::identity(2, 2) * 0.25).norm() < 1e-12);

        let sc = scalar(1.0);
        let k = sc.covariance_q(1.0, 0.0).unwrap();
        let exact = (E * E - 1.0) / 2.0;
        assert!((k.q_ts[(0, 0)] - exact).abs() < 1e-8 * exact);
        assert!((k.q_ts[(0, 0)] - 3.194528).abs() < 1e-6);
    }

    #[test]
    fn factor_invariants() {
        let p =
            PropagatorCache::new(CoefficientSet::rotation(Affine { value: 0.5, slope: 1.0 }, 0.8).unwrap(), 1e-10, 8)
                .unwrap();
        let k = p.covariance_q(1.3, 0.2).unwrap();
        let asym = (&k.q_ts - k.q_ts.transpose()).norm() / k.q_ts.norm();
        assert!(asym <= 1e-12);
        assert!(k.eig_min > 0.0);
        let rec = (&k.chol * k.chol.transpose() - &k.q_ts).norm() / k.q_ts.norm();
        assert!(rec <= 1e-10);
    }

    #[test]
    fn degenerate_covariance_is_reported() {
        let err = KernelParams::from_parts(
            1.0,
            0.0,
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap_err();
        match err {
            Error::DegenerateCovariance { min_eigenvalue } => assert!(min_eigenvalue.abs() < 1e-12),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn constants_for_exact_power_laws() {
        let heat = PropagatorCache::new(CoefficientSet::heat(1.0, 1).unwrap(), 1e-10, 8).unwrap();
        let r = heat.estimate_constants(1.0, 12).unwrap();
        assert!((r.c_inv_sqrt - 1.0).abs() < 1e-10);
        assert!((r.c_det - 1.0).abs() < 1e-10);

        let sc = scalar(1.0);
        let r = sc.estimate_constants(1.0, 12).unwrap();
        // Oracle: (gap / ((e^{2 gap} - 1) / 2))^{1/2} over the same gaps.
        let expected = r
            .pairs
            .iter()
            .map(|p| {
                let gap = p.t - p.s;
                (gap / (((2.0 * gap).exp() - 1.0) / 2.0)).sqrt()
            })
            .fold(0.0, f64::max);
        assert!((r.c_inv_sqrt - expected).abs() < 1e-8);
        assert!(r.c_inv_sqrt <= 1.0 && r.c_det > 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = scalar(1.0);
        assert!(p.flow_u(-1.0, 0.0).is_err());
        assert!(p.drift_g(0.0, 1.0).is_err());
        assert!(p.covariance_q(1.0, 1.0).is_err());
        assert!(p.estimate_constants(1.0, 5).is_err());
    }
}
