//! Exterior-domain evolution by cut-off gluing and a Picard series.
//!
//! With the cut-offs `phi` (0 near the obstacle, 1 far out) and `eta`
//! (1 on `{phi < 1}`, 0 beyond `R + 5/2`):
//!
//! ```text
//! W(t,s) f = phi P_R(t,s) f_0 + (1 - phi) P_D(t,s) (eta f)
//! F(t,s) f = <Q Q^T D phi, D(u - v)> + (L(t) phi) (u - v),   u = P_R f_0, v = P_D (eta f)
//! P(t,s) f = sum_k P_k(t,s) f,  P_0 = W,  P_{k+1}(t,s) f = int_s^t P_k(t,r) F(r,s) f dr
//! ```
//!
//! `F` lives on the annulus `R + 1 <= |x| <= R + 2` where `D phi` does.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::bounded::BoundedProblem;
use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::{gradient, lp_norm, smoothstep, DomainSpec, Grid, GridFunction};
use crate::operator::apply_operator;
use crate::propagator::PropagatorCache;
use crate::quadrature::GaussLegendre;
use crate::wholespace::{ApplyOptions, GradientPath, WholeSpace};

/// Radial quintic cut-offs attached to the obstacle radius bound `R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffPair {
    pub big_r: f64,
}

/// Radial profile value and its first two radial derivatives.
type Profile = (f64, f64, f64);

impl CutoffPair {
    pub fn new(big_r: f64) -> Self {
        CutoffPair { big_r }
    }

    /// `phi(r)`: 0 for `r <= R + 1`, 1 for `r >= R + 2`.
    pub fn phi_radial(&self, r: f64) -> Profile {
        smoothstep(r - (self.big_r + 1.0))
    }

    /// `eta(r)`: 1 for `r <= R + 2`, 0 for `r >= R + 5/2`.
    pub fn eta_radial(&self, r: f64) -> Profile {
        let (s, ds, d2s) = smoothstep((r - (self.big_r + 2.0)) / 0.5);
        (1.0 - s, -ds / 0.5, -d2s / 0.25)
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        self.phi_radial(norm(x)).0
    }

    pub fn eta(&self, x: &[f64]) -> f64 {
        self.eta_radial(norm(x)).0
    }

    /// Gradient and Hessian of `phi` at `x`.
    pub fn phi_derivatives(&self, x: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
        let d = x.len();
        let r = norm(x);
        let (_, p1, p2) = self.phi_radial(r);
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        if p1 == 0.0 && p2 == 0.0 {
            return (g, h);
        }
        for i in 0..d {
            let ni = x[i] / r;
            g[i] = p1 * ni;
            for j in 0..d {
                let nj = x[j] / r;
                let delta = if i == j { 1.0 } else { 0.0 };
                h[i][j] = p2 * ni * nj + p1 / r * (delta - ni * nj);
            }
        }
        (g, h)
    }

    /// Checks every cut-off invariant at the nodes of `grid`.
    pub fn check_invariants(&self, grid: &Grid) -> Result<()> {
        let d = grid.dim();
        let r1 = self.big_r + 1.0;
        let r2 = self.big_r + 2.0;
        for p in grid.points() {
            let x = &p[..d];
            let r = norm(x);
            let (phi, eta) = (self.phi(x), self.eta(x));
            let (g, _) = self.phi_derivatives(x);
            let ok = (0.0..=1.0).contains(&phi)
                && (0.0..=1.0).contains(&eta)
                && (r > r1 || phi == 0.0)
                && (r < r2 || phi == 1.0)
                && (r > r2 || eta == 1.0)
                && (r < self.big_r + 2.5 || eta == 0.0)
                && (phi == 1.0 || eta == 1.0)
                && ((r1..=r2).contains(&r) || (g[0] == 0.0 && g[1] == 0.0));
            if !ok {
                return Err(Error::Domain(format!("cut-off invariant violated at {x:?}")));
            }
        }
        Ok(())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// How the Picard time integrals are discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMap {
    /// `r = s + tau^2`, Gauss–Legendre in `tau`; bounded integrand for an
    /// `(r - s)^{-1/2}` singularity.
    Square,
    /// `r = s + (t - s) sin^2(pi u / 2)`, Gauss–Legendre in `u`; clusters
    /// nodes at both ends, where `W(t,r)` also has a layer as `r -> t`.
    SineSquared,
    /// Plain Gauss–Legendre in `r`.
    Linear,
}

/// How `D(u - v)` is formed on the annulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionGradient {
    /// Central differences of `u - v` on the grid; the truncation errors of
    /// the two branches cancel where `u = v`.
    GridDifference,
    /// Whole-space gradient from the sampled path, minus the grid gradient of `v`.
    WholeSpace(GradientPath),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExteriorOptions {
    pub theta: f64,
    pub dt: f64,
    /// Gauss–Legendre nodes per time integral.
    pub nodes: usize,
    pub k_max: usize,
    /// Largest admissible `||P_{k_max} f||_p / ||P_0 f||_p`.
    pub series_tol: f64,
    pub p: f64,
    pub time_map: TimeMap,
    pub correction_gradient: CorrectionGradient,
    pub wholespace: ApplyOptions,
}

impl Default for ExteriorOptions {
    fn default() -> Self {
        ExteriorOptions {
            theta: 0.5,
            dt: 1e-3,
            nodes: 20,
            k_max: 3,
            series_tol: 5e-2,
            p: 2.0,
            time_map: TimeMap::SineSquared,
            correction_gradient: CorrectionGradient::GridDifference,
            wholespace: ApplyOptions::default(),
        }
    }
}

impl ExteriorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.k_max) {
            return Err(Error::Config(format!("k_max must lie in [1, 4], got {}", self.k_max)));
        }
        if self.nodes < 4 {
            return Err(Error::Config(format!("at least 4 quadrature nodes are required, got {}", self.nodes)));
        }
        if !(self.series_tol > 0.0) {
            return Err(Error::Config("series_tol must be positive".into()));
        }
        if !(self.p >= 1.0) {
            return Err(Error::Config(format!("p must be at least 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// Per-term record of one Picard evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    /// `||P_k(t,s) f||_p` for `k = 0..=truncation_k`.
    pub term_norms: Vec<f64>,
    /// Lemma-form envelope `C0^{k+1} Gamma(1/2)^k (t-s)^{k/2} / Gamma(1 + k/2) ||f||_p`.
    pub tail_bound: Vec<f64>,
    /// Envelope shaped like the remainder bound,
    /// `C^{k+1} Gamma(1/2)^k (t-s)^{(k-1)/2} / [(k-1)/2]! ||f||_p` for `k >= 1`,
    /// with `C` fitted so that it meets `||P_1 f||_p`.
    pub factorial_bound: Vec<f64>,
    pub quad_nodes_per_level: Vec<usize>,
    pub truncation_k: usize,
    /// Last-term heuristic `||P_{k_max} f||_p`.
    pub est_series_error: f64,
    /// Empirical `max(||W g|| / ||g||, (r - s)^{1/2} ||F(r,s) g|| / ||g||)`.
    pub c0: f64,
    pub f_norm: f64,
    pub converged: bool,
    pub wall_time_s: f64,
}

impl PicardDiagnostics {
    /// `||P_{k+1} f|| / ||P_k f||`.
    pub fn ratios(&self) -> Vec<f64> {
        self.term_norms.windows(2).map(|w| w[1] / w[0]).collect()
    }

    /// Deterministic JSON, without the wall-clock field.
    pub fn to_report_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("diagnostics serialize");
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_time_s");
        }
        v
    }
}

/// Exterior problem on `Omega = R^d \ K` for the default interval or disc
/// obstacle.
pub struct Exterior {
    domain: DomainSpec,
    cut: CutoffPair,
    grid: Grid,
    ws: WholeSpace,
    bounded: BoundedProblem,
    opts: ExteriorOptions,
    omega: Vec<bool>,
    phi: Vec<f64>,
    eta: Vec<f64>,
    /// Nodes with `phi > 0`, where the whole-space branch is needed.
    outer: Vec<usize>,
    outer_points: Vec<[f64; 2]>,
    annulus: Vec<usize>,
    annulus_points: Vec<[f64; 2]>,
    annulus_mask: Vec<bool>,
    /// Annulus nodes and their `Omega` neighbours.
    halo: Vec<usize>,
    halo_points: Vec<[f64; 2]>,
    phi_grad: Vec<[f64; 2]>,
    phi_hess: Vec<[[f64; 2]; 2]>,
}

#[derive(Default)]
struct Tally {
    c0: f64,
}

impl Exterior {
    pub fn new(
        coeffs: CoefficientSet,
        domain: DomainSpec,
        grid: &Grid,
        ode_tol: f64,
        quad_nodes: usize,
        opts: ExteriorOptions,
    ) -> Result<Self> {
        opts.validate()?;
        domain.validate(grid)?;
        if domain.kind == crate::grid::DomainKind::WholeSpace {
            return Err(Error::Domain("the exterior construction needs an obstacle".into()));
        }
        let cut = CutoffPair::new(domain.big_r);
        cut.check_invariants(grid)?;
        let omega = domain.omega_mask(grid);
        let bounded = BoundedProblem::new(coeffs.clone(), grid, domain.bounded_mask(grid), opts.theta, opts.dt)?;
        let cache = PropagatorCache::new(coeffs, ode_tol, quad_nodes)?;
        let ws = WholeSpace::new(Arc::new(cache), opts.wholespace)?;
        let d = grid.dim();
        let mut phi = Vec::with_capacity(grid.len());
        let mut eta = Vec::with_capacity(grid.len());
        let mut outer = Vec::new();
        let mut annulus = Vec::new();
        let mut annulus_mask = vec![false; grid.len()];
        let (r1, r2) = (domain.big_r + 1.0, domain.big_r + 2.0);
        for (k, p) in grid.points().enumerate() {
            let x = &p[..d];
            phi.push(cut.phi(x));
            eta.push(cut.eta(x));
            if phi[k] > 0.0 {
                outer.push(k);
            }
            let r = norm(x);
            if omega[k] && (r1..=r2).contains(&r) {
                annulus.push(k);
                annulus_mask[k] = true;
            }
        }
        let outer_points = outer.iter().map(|&k| grid.point(k)).collect();
        let annulus_points: Vec<[f64; 2]> = annulus.iter().map(|&k| grid.point(k)).collect();
        let mut in_halo = annulus_mask.clone();
        for &k in &annulus {
            for j in crate::grid::neighbours(grid, k) {
                in_halo[j] |= omega[j];
            }
        }
        let halo: Vec<usize> = (0..grid.len()).filter(|&k| in_halo[k]).collect();
        let halo_points = halo.iter().map(|&k| grid.point(k)).collect();
        let (phi_grad, phi_hess) = annulus_points.iter().map(|p| cut.phi_derivatives(&p[..d])).unzip();
        Ok(Exterior {
            domain,
            cut,
            grid: grid.clone(),
            ws,
            bounded,
            opts,
            omega,
            phi,
            eta,
            outer,
            outer_points,
            annulus,
            annulus_points,
            annulus_mask,
            halo,
            halo_points,
            phi_grad,
            phi_hess,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn cutoffs(&self) -> &CutoffPair {
        &self.cut
    }

    pub fn options(&self) -> &ExteriorOptions {
        &self.opts
    }

    pub fn omega_mask(&self) -> &[bool] {
        &self.omega
    }

    pub fn annulus_mask(&self) -> &[bool] {
        &self.annulus_mask
    }

    pub fn wholespace(&self) -> &WholeSpace {
        &self.ws
    }

    pub fn bounded(&self) -> &BoundedProblem {
        &self.bounded
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        self.bounded.coeffs()
    }

    /// `f` restricted to `Omega` (masked nodes pinned to zero).
    pub fn restrict(&self, f: &GridFunction) -> GridFunction {
        GridFunction { grid: f.grid.clone(), values: f.values.clone(), mask: None }.with_mask(self.omega.clone())
    }

    fn check(&self, t: f64, s: f64, f: &GridFunction) -> Result<()> {
        if t < s {
            return Err(Error::Domain(format!("evolution needs t >= s, got t = {t}, s = {s}")));
        }
        if f.grid != self.grid {
            return Err(Error::Domain("data grid differs from the exterior grid".into()));
        }
        Ok(())
    }

    /// `f_0`: extension by zero, unmasked.
    fn extend_by_zero(&self, f: &GridFunction) -> GridFunction {
        let mut f0 = GridFunction::zeros(&self.grid);
        for k in 0..f0.values.len() {
            if self.omega[k] {
                f0.values[k] = f.values[k];
            }
        }
        f0
    }

    /// `f_D = eta f` on the bounded mask.
    fn localize(&self, f: &GridFunction) -> GridFunction {
        let mut fd = GridFunction::zeros(&self.grid);
        for k in 0..fd.values.len() {
            if self.omega[k] {
                fd.values[k] = self.eta[k] * f.values[k];
            }
        }
        fd.with_mask(self.bounded.mask().to_vec())
    }

    /// `W(t,s) f`; exactly `f` on `Omega` when `t = s`.
    pub fn apply_w(&self, t: f64, s: f64, f: &GridFunction) -> Result<GridFunction> {
        self.check(t, s, f)?;
        if t == s {
            return Ok(self.restrict(f));
        }
        let f0 = self.extend_by_zero(f);
        let pr = self.ws.apply_at(t, s, &f0, &self.outer_points)?;
        let pd = self.bounded.evolve(t, s, &self.localize(f))?;
        Ok(self.blend(&pr, &pd))
    }

    /// `phi u + (1 - phi) v` with `u` given on the outer nodes.
    fn blend(&self, pr: &[f64], pd: &GridFunction) -> GridFunction {
        let mut w = GridFunction::zeros(&self.grid);
        for k in 0..w.values.len() {
            w.values[k] = (1.0 - self.phi[k]) * pd.values[k];
        }
        for (i, &k) in self.outer.iter().enumerate() {
            w.values[k] += self.phi[k] * pr[i];
        }
        w.with_mask(self.omega.clone())
    }

    /// `F(t,s) f`, zero off the annulus.
    pub fn apply_f(&self, t: f64, s: f64, f: &GridFunction) -> Result<GridFunction> {
        self.check(t, s, f)?;
        if !(t > s) {
            return Err(Error::Domain(format!("F(t,s) needs t > s, got t = {t}, s = {s}")));
        }
        let v = self.bounded.evolve(t, s, &self.localize(f))?;
        self.correction(t, s, &self.extend_by_zero(f), &v)
    }

    /// `F(r_i, s) f` for increasing `rs`, sharing one bounded-domain sweep.
    fn apply_f_many(&self, s: f64, rs: &[f64], f: &GridFunction) -> Result<Vec<GridFunction>> {
        let vs = self.bounded.evolve_many(s, rs, &self.localize(f))?;
        let f0 = self.extend_by_zero(f);
        rs.par_iter().zip(vs.par_iter()).map(|(&r, v)| self.correction(r, s, &f0, v)).collect()
    }

    fn correction(&self, t: f64, s: f64, f0: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        let d = self.grid.dim();
        let (u, du): (Vec<f64>, Vec<[f64; 2]>) = match self.opts.correction_gradient {
            CorrectionGradient::GridDifference => {
                let uh = self.ws.apply_at(t, s, f0, &self.halo_points)?;
                let mut diff = GridFunction::zeros(&self.grid);
                for (&k, &x) in self.halo.iter().zip(&uh) {
                    diff.values[k] = x - v.values[k];
                }
                let dd = gradient(&diff);
                let u = self.annulus.iter().map(|&k| diff.values[k] + v.values[k]).collect();
                let du = self
                    .annulus
                    .iter()
                    .map(|&k| [dd[0].values[k], if d > 1 { dd[1].values[k] } else { 0.0 }])
                    .collect();
                (u, du)
            }
            CorrectionGradient::WholeSpace(path) => {
                let ev = self.ws.evaluate(t, s, f0, &self.annulus_points, Some(path))?;
                let dv = gradient(v);
                let du = self
                    .annulus
                    .iter()
                    .zip(ev.gradients.expect("gradient requested"))
                    .map(|(&k, g)| [g[0] + v_grad(&dv, k, 0), g[1] + v_grad(&dv, k, 1)])
                    .collect();
                (ev.values, du)
            }
        };
        let coeffs = self.coeffs();
        let qq = coeffs.diffusion(t) * 2.0;
        let m = coeffs.try_m(t)?;
        let c = coeffs.try_c(t)?;
        let mut out = GridFunction::zeros(&self.grid);
        for (i, &k) in self.annulus.iter().enumerate() {
            let x = self.annulus_points[i];
            let g = self.phi_grad[i];
            let h = self.phi_hess[i];
            let diff = u[i] - v.values[k];
            let mut l_phi = 0.0;
            let mut cross = 0.0;
            for a in 0..d {
                let b = (0..d).map(|j| m[(a, j)] * x[j]).sum::<f64>() + c[a];
                l_phi += b * g[a];
                for j in 0..d {
                    l_phi += 0.5 * qq[(a, j)] * h[a][j];
                    cross += qq[(a, j)] * g[a] * du[i][j];
                }
            }
            out.values[k] = cross + l_phi * diff;
        }
        let out = out.with_mask(self.omega.clone());
        let leaked = out.values.iter().zip(&self.annulus_mask).any(|(&v, &a)| v != 0.0 && !a);
        assert!(!leaked, "F(t,s) f must vanish off the annulus");
        Ok(out)
    }

    /// Nodes and weights of one Picard time integral over `[s, t]`.
    pub fn time_nodes(&self, s: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
        let rule = GaussLegendre::new(self.opts.nodes);
        match self.opts.time_map {
            TimeMap::Linear => rule.mapped(s, t),
            TimeMap::Square => {
                let (tau, w) = rule.mapped(0.0, (t - s).sqrt());
                let r = tau.iter().map(|&x| s + x * x).collect();
                let w = tau.iter().zip(&w).map(|(&x, &w)| 2.0 * x * w).collect();
                (r, w)
            }
            TimeMap::SineSquared => {
                let (u, w) = rule.mapped(0.0, 1.0);
                let half_pi = std::f64::consts::FRAC_PI_2;
                let r = u.iter().map(|&x| s + (t - s) * (half_pi * x).sin().powi(2)).collect();
                let w = u.iter().zip(&w).map(|(&x, &w)| (t - s) * half_pi * (2.0 * half_pi * x).sin() * w).collect();
                (r, w)
            }
        }
    }

    /// `P_0 g, ..., P_depth g` at `(t, s)`.
    fn terms(&self, depth: usize, t: f64, s: f64, g: &GridFunction, tally: &Mutex<Tally>) -> Result<Vec<GridFunction>> {
        let p = self.opts.p;
        let w = self.apply_w(t, s, g)?;
        let gn = lp_norm(g, p);
        if gn > 0.0 {
            let mut tl = tally.lock().expect("tally poisoned");
            tl.c0 = tl.c0.max(lp_norm(&w, p) / gn);
        }
        let mut out = vec![w];
        if depth == 0 {
            return Ok(out);
        }
        let zero = GridFunction::zeros(&self.grid).with_mask(self.omega.clone());
        if t == s || gn == 0.0 {
            out.extend(std::iter::repeat_n(zero, depth));
            return Ok(out);
        }
        let (rs, ws) = self.time_nodes(s, t);
        let fs = self.apply_f_many(s, &rs, g)?;
        {
            let mut tl = tally.lock().expect("tally poisoned");
            for (r, fg) in rs.iter().zip(&fs) {
                tl.c0 = tl.c0.max(lp_norm(fg, p) * (r - s).sqrt() / gn);
            }
        }
        let subs: Vec<Vec<GridFunction>> = rs
            .par_iter()
            .zip(fs.par_iter())
            .map(|(&r, fg)| self.terms(depth - 1, t, r, fg, tally))
            .collect::<Result<_>>()?;
        for k in 1..=depth {
            let mut acc = zero.clone();
            for (sub, &wi) in subs.iter().zip(&ws) {
                for (a, b) in acc.values.iter_mut().zip(&sub[k - 1].values) {
                    *a += wi * b;
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Truncated series `sum_{k <= k_max} P_k(t,s) f` with per-term
    /// diagnostics; never fails on slow decay, see `converged`.
    pub fn picard_series(
        &self,
        t: f64,
        s: f64,
        f: &GridFunction,
    ) -> Result<(GridFunction, Vec<GridFunction>, PicardDiagnostics)> {
        self.check(t, s, f)?;
        let start = Instant::now();
        let f = self.restrict(f);
        let k_max = self.opts.k_max;
        let tally = Mutex::new(Tally::default());
        let terms = self.terms(k_max, t, s, &f, &tally)?;
        let mut sum = terms[0].clone();
        for term in &terms[1..] {
            sum = sum.add(term);
        }
        let p = self.opts.p;
        let term_norms: Vec<f64> = terms.iter().map(|u| lp_norm(u, p)).collect();
        let f_norm = lp_norm(&f, p);
        let c0 = tally.into_inner().expect("tally poisoned").c0;
        let gap = t - s;
        let root_pi = gamma(0.5);
        let tail_bound = (0..=k_max)
            .map(|k| {
                let k = k as f64;
                c0.powf(k + 1.0) * root_pi.powf(k) * gap.powf(0.5 * k) / gamma(1.0 + 0.5 * k) * f_norm
            })
            .collect();
        let factorial_bound = factorial_envelope(&term_norms, f_norm, gap);
        let est = *term_norms.last().expect("at least one term");
        let converged = est <= self.opts.series_tol * term_norms[0].max(f64::MIN_POSITIVE) || est == 0.0;
        let diag = PicardDiagnostics {
            term_norms,
            tail_bound,
            factorial_bound,
            quad_nodes_per_level: vec![self.opts.nodes; k_max],
            truncation_k: k_max,
            est_series_error: est,
            c0,
            f_norm,
            converged,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((sum, terms, diag))
    }

    /// The series value, or a non-convergence error when the last term is
    /// above `series_tol` relative to `||P_0 f||`.
    pub fn picard_apply(&self, t: f64, s: f64, f: &GridFunction) -> Result<(GridFunction, PicardDiagnostics)> {
        let (u, _, diag) = self.picard_series(t, s, f)?;
        if !diag.converged {
            return Err(Error::NonConvergence {
                est_error: diag.est_series_error,
                tol: self.opts.series_tol * diag.term_norms[0],
                k_max: diag.truncation_k,
            });
        }
        Ok((u, diag))
    }

    /// Right-hand side of the integral equation,
    /// `W(t,s) f + int_s^t P(t,r) F(r,s) f dr`, with `P` the truncated series.
    pub fn integral_equation_rhs(&self, t: f64, s: f64, f: &GridFunction) -> Result<GridFunction> {
        self.check(t, s, f)?;
        let f = self.restrict(f);
        let mut out = self.apply_w(t, s, &f)?;
        if t == s {
            return Ok(out);
        }
        let (rs, ws) = self.time_nodes(s, t);
        let fs = self.apply_f_many(s, &rs, &f)?;
        let parts: Vec<GridFunction> = rs
            .par_iter()
            .zip(fs.par_iter())
            .map(|(&r, fg)| self.picard_series(t, r, fg).map(|x| x.0))
            .collect::<Result<_>>()?;
        for (part, &w) in parts.iter().zip(&ws) {
            for (a, b) in out.values.iter_mut().zip(&part.values) {
                *a += w * b;
            }
        }
        Ok(out)
    }

    /// Largest `|u|` over nodes adjacent to the obstacle.
    pub fn boundary_trace(&self, u: &GridFunction) -> f64 {
        self.domain.boundary_adjacent(&self.grid).into_iter().map(|k| u.values[k].abs()).fold(0.0, f64::max)
    }

    /// `L_Omega(t) u` by grid differences with Dirichlet zeros at the obstacle.
    pub fn apply_operator(&self, t: f64, u: &GridFunction) -> GridFunction {
        apply_operator(self.coeffs(), t, &self.restrict(u))
    }

    /// Interior probe nodes: in `Omega`, at least `margin` cells from the
    /// obstacle and from the annulus, and inside `B(radius)`.
    pub fn probes(&self, margin: usize, radius: f64) -> Vec<usize> {
        let h = self.grid.h_max();
        let gap = margin as f64 * h;
        let a = self.domain.obstacle_radius;
        let (r1, r2) = (self.domain.big_r + 1.0, self.domain.big_r + 2.0);
        (0..self.grid.len())
            .filter(|&k| {
                let r = self.grid.radius(k);
                self.omega[k]
                    && r >= a + gap
                    && (r <= r1 - gap || r >= r2 + gap)
                    && r <= radius
                    && !crate::grid::on_box_edge(&self.grid, k)
            })
            .collect()
    }

    /// Discrete `L^2` norm of `(P(t+dt,s) f - P(t-dt,s) f) / (2 dt) - L(t) P(t,s) f`
    /// over `probes`.
    pub fn t_derivative_residual(&self, t: f64, s: f64, f: &GridFunction, dt: f64, probes: &[usize]) -> Result<f64> {
        if !(t - s > 2.0 * dt) {
            return Err(Error::Domain(format!("t - s must exceed 2 dt, got t - s = {}, dt = {dt}", t - s)));
        }
        let up = self.picard_series(t + dt, s, f)?.0;
        let um = self.picard_series(t - dt, s, f)?.0;
        let u = self.picard_series(t, s, f)?.0;
        let lu = self.apply_operator(t, &u);
        Ok(self.probe_norm(probes, |k| (up.values[k] - um.values[k]) / (2.0 * dt) - lu.values[k]))
    }

    /// Discrete `L^2` norm of `(P(t,s+ds) f - P(t,s-ds) f) / (2 ds) + P(t,s) L(s) f`
    /// over `probes`.
    pub fn s_derivative_residual(&self, t: f64, s: f64, f: &GridFunction, ds: f64, probes: &[usize]) -> Result<f64> {
        if !(t - s > 2.0 * ds) || s - ds < 0.0 {
            return Err(Error::Domain(format!("need t - s > 2 ds and s >= ds, got t = {t}, s = {s}, ds = {ds}")));
        }
        let up = self.picard_series(t, s + ds, f)?.0;
        let um = self.picard_series(t, s - ds, f)?.0;
        let lf = self.apply_operator(s, f);
        let plf = self.picard_series(t, s, &lf)?.0;
        Ok(self.probe_norm(probes, |k| (up.values[k] - um.values[k]) / (2.0 * ds) + plf.values[k]))
    }

    fn probe_norm<F: Fn(usize) -> f64>(&self, probes: &[usize], r: F) -> f64 {
        (probes.iter().map(|&k| r(k).powi(2)).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }
}

/// `-dv_axis` at node `k`, zero past the dimension; with the whole-space
/// gradient `g` this gives `D(u - v)`.
fn v_grad(dv: &[GridFunction], k: usize, axis: usize) -> f64 {
    dv.get(axis).map_or(0.0, |g| -g.values[k])
}

/// `C^{k+1} Gamma(1/2)^k (t-s)^{(k-1)/2} / [(k-1)/2]! ||f||` for `k >= 1` with
/// `C` chosen to meet `||P_1 f||`; entry 0 repeats `||P_0 f||`.
fn factorial_envelope(term_norms: &[f64], f_norm: f64, gap: f64) -> Vec<f64> {
    let root_pi = gamma(0.5);
    let mut out = vec![term_norms[0]];
    if term_norms.len() < 2 || f_norm == 0.0 {
        out.resize(term_norms.len(), 0.0);
        return out;
    }
    let c = (term_norms[1] / (f_norm * root_pi)).sqrt();
    for k in 1..term_norms.len() {
        let kf = k as f64;
        let fact = gamma(((k - 1) / 2) as f64 + 1.0);
        out.push(c.powf(kf + 1.0) * root_pi.powf(kf) * gap.powf(0.5 * (kf - 1.0)) / fact * f_norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::gaussian_bump;

    fn exterior(h: f64) -> Exterior {
        let g = Grid::with_spacing(-20.0, 20.0, h, 1).unwrap();
        Exterior::new(
            CoefficientSet::heat(1.0, 1).unwrap(),
            DomainSpec::default(),
            &g,
            1e-10,
            8,
            ExteriorOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn cutoff_invariants() {
        let c = CutoffPair::new(2.0);
        let g = Grid::with_spacing(-8.0, 8.0, 1.0 / 64.0, 1).unwrap();
        c.check_invariants(&g).unwrap();
        let g2 = Grid::with_spacing(-8.0, 8.0, 0.25, 2).unwrap();
        c.check_invariants(&g2).unwrap();
        assert_eq!(c.phi(&[2.9]), 0.0);
        assert_eq!(c.phi(&[4.1]), 1.0);
        assert_eq!(c.eta(&[3.9]), 1.0);
        assert_eq!(c.eta(&[4.6]), 0.0);
        // phi f + (1 - phi) eta f = f
        for x in [-6.0, -3.5, 0.0, 3.2, 4.2, 4.4] {
            let (p, e) = (c.phi(&[x]), c.eta(&[x]));
            assert_eq!(p + (1.0 - p) * e, 1.0);
        }
    }

    #[test]
    fn radial_derivatives_match_differences() {
        let c = CutoffPair::new(2.0);
        let x = [2.3, 2.1];
        let (g, h) = c.phi_derivatives(&x);
        let e = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += e;
            xm[i] -= e;
            assert!(((c.phi(&xp) - c.phi(&xm)) / (2.0 * e) - g[i]).abs() < 1e-8);
            let (gp, _) = c.phi_derivatives(&xp);
            let (gm, _) = c.phi_derivatives(&xm);
            for j in 0..2 {
                assert!(((gp[j] - gm[j]) / (2.0 * e) - h[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn w_is_identity_at_equal_times_and_zero_on_zero() {
        let ex = exterior(1.0 / 16.0);
        let f = ex.restrict(&gaussian_bump(ex.grid(), &[3.0], 0.4));
        let w = ex.apply_w(0.3, 0.3, &f).unwrap();
        assert_eq!(w.values, f.values);
        let z = GridFunction::zeros(ex.grid());
        assert!(ex.apply_w(0.5, 0.3, &z).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(ex.apply_f(0.5, 0.3, &z).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn far_field_data_sees_no_obstacle() {
        let ex = exterior(1.0 / 32.0);
        let f = ex.restrict(&gaussian_bump(ex.grid(), &[10.0], 0.5));
        let w = ex.apply_w(0.2, 0.0, &f).unwrap();
        let pure = ex.wholespace().apply(0.2, 0.0, &ex.extend_by_zero(&f), ex.grid()).unwrap();
        assert!(lp_norm(&w.sub(&pure), 2.0) <= 1e-6 * lp_norm(&pure, 2.0));
        let fo = ex.apply_f(0.01, 0.0, &f).unwrap();
        assert!(lp_norm(&fo, 2.0) <= 1e-6 * lp_norm(&f, 2.0));
        let (_, diag) = ex.picard_apply(0.05, 0.0, &f).unwrap();
        assert!(diag.term_norms[1] <= 1e-6 * diag.term_norms[0]);
    }

    #[test]
    fn correction_lives_on_the_annulus() {
        let ex = exterior(1.0 / 32.0);
        let f = ex.restrict(&gaussian_bump(ex.grid(), &[3.5], 0.3));
        let fo = ex.apply_f(0.1, 0.0, &f).unwrap();
        assert!(fo.values.iter().any(|&v| v != 0.0));
        for (k, p) in ex.grid().points().enumerate() {
            if !(3.0..=4.0).contains(&p[0].abs()) {
                assert_eq!(fo.values[k], 0.0);
            }
        }
    }

    #[test]
    fn time_maps_integrate_inverse_root() {
        let g = Grid::with_spacing(-20.0, 20.0, 0.125, 1).unwrap();
        for time_map in [TimeMap::Square, TimeMap::SineSquared] {
            let opts = ExteriorOptions { time_map, ..ExteriorOptions::default() };
            let ex = Exterior::new(CoefficientSet::heat(1.0, 1).unwrap(), DomainSpec::default(), &g, 1e-10, 8, opts)
                .unwrap();
            let (r, w) = ex.time_nodes(0.2, 0.7);
            assert!(r.iter().all(|&r| r > 0.2 && r < 0.7));
            let v: f64 = r.iter().zip(&w).map(|(&r, &w)| w * (r - 0.2f64).powf(-0.5)).sum();
            assert!((v - 2.0 * 0.5f64.sqrt()).abs() < 1e-12, "{time_map:?}: {v}");
            // Both ends singular: int_0^1 (x (1 - x))^{-1/2} dx = pi.
            if time_map == TimeMap::SineSquared {
                let v: f64 = r.iter().zip(&w).map(|(&r, &w)| w * ((r - 0.2) * (0.7 - r) / 0.25f64).powf(-0.5)).sum();
                assert!((v - 0.5 * std::f64::consts::PI).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn diagnostics_json_drops_the_clock() {
        let d = PicardDiagnostics {
            term_norms: vec![1.0, 0.1],
            tail_bound: vec![1.0, 0.5],
            factorial_bound: vec![1.0, 0.1],
            quad_nodes_per_level: vec![6],
            truncation_k: 1,
            est_series_error: 0.1,
            c0: 1.0,
            f_norm: 1.0,
            converged: true,
            wall_time_s: 3.0,
        };
        let v = d.to_report_json();
        assert!(v.get("wall_time_s").is_none());
        assert_eq!(v["truncation_k"], 1);
        assert_eq!(d.ratios(), vec![0.1]);
    }

    #[test]
    fn invalid_options() {
        let g = Grid::with_spacing(-20.0, 20.0, 0.25, 1).unwrap();
        let heat = CoefficientSet::heat(1.0, 1).unwrap();
        let bad = ExteriorOptions { k_max: 5, ..Default::default() };
        assert!(Exterior::new(heat.clone(), DomainSpec::default(), &g, 1e-10, 8, bad).is_err());
        let small = Grid::with_spacing(-4.0, 4.0, 0.25, 1).unwrap();
        assert!(Exterior::new(heat, DomainSpec::default(), &small, 1e-10, 8, ExteriorOptions::default()).is_err());
    }
}
