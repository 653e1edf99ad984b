//! Finite-difference evolution on a bounded masked domain with homogeneous
//! Dirichlet data, by the θ-scheme
//!
//! ```text
//! (I - θ Δτ L(τ + Δτ)) u⁺ = (I + (1 - θ) Δτ L(τ)) u
//! ```
//!
//! The system lives on the bounding box of the mask; pinned nodes carry
//! identity rows and are never coupled to, so they stay exactly zero.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::{gradient, lp_norm, lp_norm_vec, on_box_edge, Grid, GridFunction, MIN_POINTS};
use crate::linalg::{BandLu, BandMatrix};

pub const SOLVER_TOL: f64 = 1e-10;
/// Cell Péclet number above which drift is upwinded.
pub const PECLET_MAX: f64 = 2.0;

pub struct BoundedProblem {
    coeffs: CoefficientSet,
    theta: f64,
    dt: f64,
    grid: Grid,
    mask: Vec<bool>,
    /// Cropped working grid and its node offset in `grid`.
    sub: Grid,
    offset: [usize; 2],
    sub_mask: Vec<bool>,
    factors: Mutex<HashMap<u64, Arc<(BandMatrix, BandLu)>>>,
    warned: Mutex<bool>,
}

impl BoundedProblem {
    pub fn new(coeffs: CoefficientSet, grid: &Grid, mask: Vec<bool>, theta: f64, dt: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&theta) {
            return Err(Error::Config(format!("theta must lie in [1/2, 1], got {theta}")));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if mask.len() != grid.len() {
            return Err(Error::Domain("mask length differs from the grid".into()));
        }
        if coeffs.dim() != grid.dim() {
            return Err(Error::Domain("coefficient and grid dimensions differ".into()));
        }
        let d = grid.dim();
        let mut lo = [usize::MAX; 2];
        let mut hi = [0usize; 2];
        let mut any = false;
        for k in 0..grid.len() {
            if mask[k] {
                if on_box_edge(grid, k) {
                    return Err(Error::Domain("domain mask touches the grid box edge".into()));
                }
                any = true;
                let idx = grid.multi_index(k);
                for a in 0..d {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        if !any {
            return Err(Error::Domain("domain mask has no interior point".into()));
        }
        let mut slo = Vec::new();
        let mut shi = Vec::new();
        let mut sn = Vec::new();
        let mut offset = [0usize; 2];
        for a in 0..d {
            let mut l = lo[a] - 1;
            let mut h = hi[a] + 1;
            while h - l + 1 < MIN_POINTS {
                l = l.saturating_sub(1);
                if h - l + 1 < MIN_POINTS && h + 1 < grid.n()[a] {
                    h += 1;
                }
            }
            offset[a] = l;
            slo.push(grid.coord(a, l));
            shi.push(grid.coord(a, h));
            sn.push(h - l + 1);
        }
        let sub = Grid::new(&slo, &shi, &sn)?;
        let sub_mask = (0..sub.len())
            .map(|k| {
                let [i, j] = sub.multi_index(k);
                mask[grid.flat(i + offset[0], if d == 2 { j + offset[1] } else { 0 })]
            })
            .collect();
        Ok(BoundedProblem {
            coeffs,
            theta,
            dt,
            grid: grid.clone(),
            mask,
            sub,
            offset,
            sub_mask,
            factors: Mutex::new(HashMap::new()),
            warned: Mutex::new(false),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coeffs
    }

    /// The cropped working grid.
    pub fn working_grid(&self) -> &Grid {
        &self.sub
    }

    pub fn working_mask(&self) -> &[bool] {
        &self.sub_mask
    }

    fn to_full(&self, k: usize) -> usize {
        let [i, j] = self.sub.multi_index(k);
        let j = if self.grid.dim() == 2 { j + self.offset[1] } else { 0 };
        self.grid.flat(i + self.offset[0], j)
    }

    fn band(&self) -> usize {
        if self.sub.dim() == 1 {
            1
        } else {
            self.sub.n()[0] + 1
        }
    }

    /// Second-order grid operator `L(t)` on the working grid, with zero rows
    /// at pinned nodes. Returns the matrix and whether any drift term was
    /// upwinded.
    pub fn assemble_l(&self, t: f64) -> Result<(BandMatrix, bool)> {
        let g = &self.sub;
        let d = g.dim();
        let a = self.coeffs.diffusion(t);
        let m = self.coeffs.try_m(t)?;
        let c = self.coeffs.try_c(t)?;
        let bw = self.band();
        let mut l = BandMatrix::zeros(g.len(), bw, bw);
        let mut upwinded = false;
        let strides = [1usize, g.n()[0]];
        for k in 0..g.len() {
            if !self.sub_mask[k] {
                continue;
            }
            let x = g.point(k);
            let couple = |l: &mut BandMatrix, j: usize, v: f64| {
                if self.sub_mask[j] {
                    l.add(k, j, v);
                }
            };
            for ax in 0..d {
                let h = g.h()[ax];
                let s = strides[ax];
                let aa = a[(ax, ax)];
                let b = (0..d).map(|j| m[(ax, j)] * x[j]).sum::<f64>() + c[ax];
                l.add(k, k, -2.0 * aa / (h * h));
                couple(&mut l, k + s, aa / (h * h));
                couple(&mut l, k - s, aa / (h * h));
                if b == 0.0 {
                    continue;
                }
                if b.abs() * h / aa <= PECLET_MAX {
                    couple(&mut l, k + s, b / (2.0 * h));
                    couple(&mut l, k - s, -b / (2.0 * h));
                } else {
                    upwinded = true;
                    if b > 0.0 {
                        l.add(k, k, -b / h);
                        couple(&mut l, k + s, b / h);
                    } else {
                        l.add(k, k, b / h);
                        couple(&mut l, k - s, -b / h);
                    }
                }
            }
            if d == 2 {
                let a12 = a[(0, 1)] + a[(1, 0)];
                if a12 != 0.0 {
                    let w = a12 / (4.0 * g.h()[0] * g.h()[1]);
                    let r = strides[1];
                    couple(&mut l, k + r + 1, w);
                    couple(&mut l, k - r - 1, w);
                    couple(&mut l, k + r - 1, -w);
                    couple(&mut l, k - r + 1, -w);
                }
            }
        }
        Ok((l, upwinded))
    }

    /// `I + scale L` with identity rows at pinned nodes.
    fn shifted(&self, l: &BandMatrix, scale: f64) -> BandMatrix {
        let mut a = l.clone();
        for k in 0..self.sub.len() {
            if self.sub_mask[k] {
                for j in a.row_range(k) {
                    let v = l.get(k, j);
                    if v != 0.0 {
                        a.add(k, j, (scale - 1.0) * v);
                    }
                }
                a.add(k, k, 1.0);
            } else {
                a.add(k, k, 1.0);
            }
        }
        a
    }

    fn warn_upwind(&self, upwinded: bool) {
        if upwinded && self.theta == 0.5 {
            let mut w = self.warned.lock().expect("warning flag poisoned");
            if !*w {
                log::warn!("Crank-Nicolson step with upwinded drift: first order in space near large |x|");
                *w = true;
            }
        }
    }

    /// Matrices `(B, LU of A)` for one step of size `step` starting at `tau`.
    fn step_operators(&self, tau: f64, step: f64) -> Result<Arc<(BandMatrix, BandLu)>> {
        let build = |tau: f64| -> Result<Arc<(BandMatrix, BandLu)>> {
            let (l0, up0) = self.assemble_l(tau)?;
            let (l1, up1) = if self.coeffs.is_autonomous() { (l0.clone(), up0) } else { self.assemble_l(tau + step)? };
            self.warn_upwind(up0 || up1);
            let b = self.shifted(&l0, (1.0 - self.theta) * step);
            let a = self.shifted(&l1, -self.theta * step);
            Ok(Arc::new((b, a.factor()?)))
        };
        if !self.coeffs.is_autonomous() {
            return build(tau);
        }
        let key = step.to_bits();
        if let Some(f) = self.factors.lock().expect("factor cache poisoned").get(&key) {
            return Ok(Arc::clone(f));
        }
        let f = build(tau)?;
        self.factors.lock().expect("factor cache poisoned").insert(key, Arc::clone(&f));
        Ok(f)
    }

    pub fn evolve(&self, t: f64, s: f64, f: &GridFunction) -> Result<GridFunction> {
        self.evolve_observed(t, s, f, &mut |_, _| {})
    }

    /// As [`BoundedProblem::evolve`], calling `observer(tau, u)` on the working
    /// grid after every step.
    pub fn evolve_observed(
        &self,
        t: f64,
        s: f64,
        f: &GridFunction,
        observer: &mut dyn FnMut(f64, &[f64]),
    ) -> Result<GridFunction> {
        if t < s {
            return Err(Error::Domain(format!("evolution needs t >= s, got t = {t}, s = {s}")));
        }
        if f.grid != self.grid {
            return Err(Error::Domain("data grid differs from the problem grid".into()));
        }
        let mut u: Vec<f64> =
            (0..self.sub.len()).map(|k| if self.sub_mask[k] { f.values[self.to_full(k)] } else { 0.0 }).collect();
        let span = t - s;
        let n_steps = if span == 0.0 { 0 } else { ((span / self.dt) - 1e-9).ceil().max(1.0) as usize };
        let mut rhs = vec![0.0; u.len()];
        for k in 0..n_steps {
            let tau = s + self.dt * k as f64;
            let next = if k + 1 == n_steps { t } else { s + self.dt * (k + 1) as f64 };
            let ops = self.step_operators(tau, next - tau)?;
            ops.0.mul_vec(&u, &mut rhs);
            for (r, &m) in rhs.iter_mut().zip(&self.sub_mask) {
                if !m {
                    *r = 0.0;
                }
            }
            u = ops.1.solve(&rhs, SOLVER_TOL)?;
            observer(next, &u);
        }
        let mut out = GridFunction::zeros(&self.grid);
        for (k, v) in u.into_iter().enumerate() {
            out.values[self.to_full(k)] = v;
        }
        Ok(out.with_mask(self.mask.clone()))
    }

    /// `P_D(t_i, s) f` for increasing `ts`, each segment continuing from the
    /// previous state.
    pub fn evolve_many(&self, s: f64, ts: &[f64], f: &GridFunction) -> Result<Vec<GridFunction>> {
        let mut out = Vec::with_capacity(ts.len());
        let mut tau = s;
        let mut u = f.clone();
        for &t in ts {
            u = self.evolve(t, tau, &u)?;
            tau = t;
            out.push(u.clone());
        }
        Ok(out)
    }

    /// `||P_D(s + gap, s) f||_q`, `||P_D f||_p` and `||D_x P_D f||_p` over the
    /// sorted gaps, evolving incrementally from one gap to the next.
    pub fn smoothing_probe(
        &self,
        p: f64,
        q: f64,
        f: &GridFunction,
        s: f64,
        gaps: &[f64],
    ) -> Result<Vec<SmoothingSample>> {
        if gaps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("gaps must be strictly increasing".into()));
        }
        if gaps.first().is_some_and(|&g| g <= 10.0 * self.dt) {
            return Err(Error::Domain(format!("smallest gap must exceed 10 dt = {}", 10.0 * self.dt)));
        }
        let mut u = f.clone().with_mask(self.mask.clone());
        let mut tau = s;
        let mut rows = Vec::with_capacity(gaps.len());
        for &gap in gaps {
            u = self.evolve(s + gap, tau, &u)?;
            tau = s + gap;
            rows.push(SmoothingSample {
                gap,
                norm_q: lp_norm(&u, q),
                norm_p: lp_norm(&u, p),
                grad_p: lp_norm_vec(&gradient(&u), p),
            });
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSample {
    pub gap: f64,
    pub norm_q: f64,
    pub norm_p: f64,
    pub grad_p: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Affine;
    use crate::grid::sine_mode;
    use nalgebra::DVector;
    use std::f64::consts::PI;

    /// Heat with `a = 1` on `(0, pi)` padded by one pinned node on each side.
    fn interval(cells: usize, theta: f64, dt: f64) -> BoundedProblem {
        let g = Grid::new(&[0.0], &[PI], &[cells + 1]).unwrap();
        let mask = (0..g.len()).map(|k| k > 0 && k < cells).collect();
        BoundedProblem::new(CoefficientSet::heat(2f64.sqrt(), 1).unwrap(), &g, mask, theta, dt).unwrap()
    }

    #[test]
    fn laplacian_stencil() {
        let p = interval(64, 0.5, 1e-3);
        let (l, up) = p.assemble_l(0.0).unwrap();
        let h = PI / 64.0;
        assert!(!up);
        assert!((l.get(10, 10) + 2.0 / (h * h)).abs() < 1e-9);
        assert!((l.get(10, 9) - 1.0 / (h * h)).abs() < 1e-9);
        assert!((l.get(10, 11) - 1.0 / (h * h)).abs() < 1e-9);
        // pinned neighbour is never coupled
        assert_eq!(l.get(1, 0), 0.0);
    }

    #[test]
    fn central_drift_stencil() {
        let coeffs =
            CoefficientSet::heat(10.0, 1).unwrap().with_drift(DVector::from_vec(vec![1.0]), DVector::zeros(1)).unwrap();
        let g = Grid::with_spacing(-1.0, 1.0, 0.05, 1).unwrap();
        let mask = (0..g.len()).map(|k| !on_box_edge(&g, k)).collect();
        let p = BoundedProblem::new(coeffs, &g, mask, 0.5, 1e-3).unwrap();
        let (l, up) = p.assemble_l(0.0).unwrap();
        let h = 0.05;
        let a = 50.0;
        assert!(!up);
        assert!((l.get(5, 6) - (a / (h * h) + 1.0 / (2.0 * h))).abs() < 1e-9);
        assert!((l.get(5, 4) - (a / (h * h) - 1.0 / (2.0 * h))).abs() < 1e-9);
    }

    #[test]
    fn rotation_drift_row() {
        let coeffs = CoefficientSet::rotation(Affine::constant(1.0), 1.0).unwrap();
        let g = Grid::with_spacing(-2.0, 2.0, 0.25, 2).unwrap();
        let mask = (0..g.len()).map(|k| !on_box_edge(&g, k)).collect();
        let p = BoundedProblem::new(coeffs, &g, mask, 0.5, 1e-3).unwrap();
        let (l, _) = p.assemble_l(0.0).unwrap();
        // x = (1, 0): b = J x = (0, 1), central in y only.
        let sub = p.working_grid();
        let k = (0..sub.len()).find(|&k| sub.point(k) == [1.0, 0.0]).unwrap();
        let h = 0.25;
        let r = sub.n()[0];
        let diff = 0.5 / (h * h);
        assert!((l.get(k, k + r) - (diff + 1.0 / (2.0 * h))).abs() < 1e-12);
        assert!((l.get(k, k - r) - (diff - 1.0 / (2.0 * h))).abs() < 1e-12);
        assert!((l.get(k, k + 1) - diff).abs() < 1e-12);
        assert!((l.get(k, k - 1) - diff).abs() < 1e-12);
    }

    #[test]
    fn eigenmode_decay() {
        let p = interval(256, 0.5, 1e-3);
        let g = p.grid().clone();
        for (k, gap, expected) in [(1usize, 0.5, (-0.5f64).exp()), (2, 0.25, (-1.0f64).exp())] {
            let f = sine_mode(&g, k);
            let u = p.evolve(gap, 0.0, &f).unwrap();
            assert!((u.max_abs() - expected).abs() < 2e-3, "mode {k}: {}", u.max_abs());
        }
        assert!((0.606531 - (-0.5f64).exp()).abs() < 1e-6);
        let z = p.evolve(0.5, 0.0, &GridFunction::zeros(&g)).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_order_of_crank_nicolson() {
        let err = |dt: f64| {
            let p = interval(128, 0.5, dt);
            let g = p.grid().clone();
            let f = sine_mode(&g, 1);
            let u = p.evolve(0.5, 0.0, &f).unwrap();
            // Exact decay of the discrete eigenvector.
            let h = PI / 128.0;
            let lambda = 4.0 / (h * h) * (h / 2.0).sin().powi(2);
            let exact = f.scaled((-0.5 * lambda).exp());
            u.sub(&exact).max_abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() <= 1.2, "ratio {ratio}");
    }

    #[test]
    fn boundary_stays_zero_and_implicit_euler_is_monotone() {
        let p = interval(128, 1.0, 1e-3);
        let g = p.grid().clone();
        let f = GridFunction::from_fn(&g, |x| if (x[0] - 1.5).abs() < 0.3 { 1.0 } else { 0.0 });
        let mask = p.working_mask().to_vec();
        let mut prev = f.max_abs();
        p.evolve_observed(0.2, 0.0, &f, &mut |_, u| {
            for (v, &m) in u.iter().zip(&mask) {
                if !m {
                    assert_eq!(*v, 0.0);
                }
            }
            let now = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(now <= prev + 1e-14);
            prev = now;
        })
        .unwrap();
    }

    #[test]
    fn evolution_law_on_shared_step_grid() {
        let p = interval(128, 0.5, 1e-2);
        let g = p.grid().clone();
        let f = crate::grid::gaussian_bump(&g, &[1.3], 0.2).with_mask(p.mask().to_vec());
        let direct = p.evolve(0.4, 0.0, &f).unwrap();
        let split = p.evolve(0.4, 0.1, &p.evolve(0.1, 0.0, &f).unwrap()).unwrap();
        assert!(lp_norm(&direct.sub(&split), 2.0) <= 1e-8 * lp_norm(&f, 2.0));
    }

    #[test]
    fn rejects_bad_setups() {
        let g = Grid::with_spacing(0.0, 1.0, 0.1, 1).unwrap();
        let heat = CoefficientSet::heat(1.0, 1).unwrap();
        assert!(BoundedProblem::new(heat.clone(), &g, vec![false; g.len()], 0.5, 1e-3).is_err());
        assert!(BoundedProblem::new(heat.clone(), &g, vec![true; g.len()], 0.5, 1e-3).is_err());
        let inner: Vec<bool> = (0..g.len()).map(|k| !on_box_edge(&g, k)).collect();
        assert!(BoundedProblem::new(heat.clone(), &g, inner.clone(), 0.2, 1e-3).is_err());
        let p = BoundedProblem::new(heat, &g, inner, 0.5, 1e-3).unwrap();
        assert!(p.evolve(0.0, 1.0, &GridFunction::zeros(&g)).is_err());
    }
}
