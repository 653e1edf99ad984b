//! The explicit whole-space evolution
//!
//! ```text
//! P(t, s) f (x) = (k(t, s, .) * f)(U(s, t) x + g(t, s))
//! ```
//!
//! with `k(t, s, .)` the density of `N(0, Q_{t,s})`. The convolution is a
//! direct truncated stencil on the lattice of `f`; in two dimensions the
//! Gaussian is factored as `N(0, Q22)` for the second coordinate times the
//! conditional `N(rho z2, Q11 - Q12^2 / Q22)` for the first, so both passes
//! are one-dimensional (the second along a sheared line when `rho != 0`).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{derivative, Extrapolation, Grid, GridFunction};
use crate::operator::apply_operator;
use crate::propagator::{KernelParams, PropagatorCache};

/// Relative magnitude below which source values count as outside the support.
const SUPPORT_EPS: f64 = 1e-16;
/// Relative magnitude allowed at the box edge before far-field zeros are refused.
const EDGE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApplyOptions {
    /// Kernel support in standard deviations.
    pub kernel_cut: f64,
    /// Pullback interpolation order, 1 or 3.
    pub interp_order: usize,
    /// Largest lattice refinement used for narrow kernels.
    pub max_refine: usize,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions { kernel_cut: 8.0, interp_order: 3, max_refine: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Convolve against `D k = -k Q^{-1} x`; works for rough data.
    KernelGradient,
    /// Convolve the kernel against a fourth-order difference of `f`.
    DifferentiatedData,
}

/// Description of one application: kernel slice, lattice refinement and the
/// working grid the convolution is evaluated on.
#[derive(Clone, Debug)]
pub struct WholeSpaceApplyPlan {
    pub params: Arc<KernelParams>,
    pub kernel_cut: f64,
    pub conv_grid: Option<Grid>,
    pub interp_order: usize,
    pub refine: usize,
    /// Stencil weights were renormalized because the kernel stayed
    /// under-resolved after refinement.
    pub normalized: bool,
}

/// Values (and optionally gradients) of `P(t, s) f` at a point set.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub gradients: Option<Vec<[f64; 2]>>,
}

pub struct WholeSpace {
    cache: Arc<PropagatorCache>,
    opts: ApplyOptions,
}

impl WholeSpace {
    pub fn new(cache: Arc<PropagatorCache>, opts: ApplyOptions) -> Result<Self> {
        if !(opts.kernel_cut >= 1.0) {
            return Err(Error::Config(format!("kernel_cut must be at least 1, got {}", opts.kernel_cut)));
        }
        if opts.interp_order != 1 && opts.interp_order != 3 {
            return Err(Error::Config(format!("interp_order must be 1 or 3, got {}", opts.interp_order)));
        }
        if opts.max_refine == 0 {
            return Err(Error::Config("max_refine must be positive".into()));
        }
        Ok(WholeSpace { cache, opts })
    }

    pub fn cache(&self) -> &Arc<PropagatorCache> {
        &self.cache
    }

    pub fn options(&self) -> ApplyOptions {
        self.opts
    }

    fn check(&self, t: f64, s: f64, f: &GridFunction) -> Result<()> {
        if t < s {
            return Err(Error::Domain(format!("evolution needs t >= s, got t = {t}, s = {s}")));
        }
        if f.dim() != self.cache.dim() {
            return Err(Error::Domain(format!(
                "data in dimension {} for coefficients in dimension {}",
                f.dim(),
                self.cache.dim()
            )));
        }
        Ok(())
    }

    pub fn plan(&self, t: f64, s: f64, f: &GridFunction, points: &[[f64; 2]]) -> Result<WholeSpaceApplyPlan> {
        self.check(t, s, f)?;
        let params = self.cache.covariance_q(t, s)?;
        let refine = refinement(&params, &f.grid, self.opts.max_refine);
        let src = Source::from_function(f, refine)?;
        let ys = pullback(&params, points, f.dim());
        let conv_grid = src.as_ref().and_then(|src| {
            let stencils = Stencils::new(&params, src, self.opts.kernel_cut);
            target_range(src, &stencils, &ys).map(|r| src.target_grid(&r))
        });
        let normalized = Stencils::new(&params, &Source::dummy(f, refine), self.opts.kernel_cut).normalized;
        Ok(WholeSpaceApplyPlan {
            params,
            kernel_cut: self.opts.kernel_cut,
            conv_grid,
            interp_order: self.opts.interp_order,
            refine,
            normalized,
        })
    }

    /// `P(t, s) f` at `points`, with `D_x P(t, s) f` when `grad` is given.
    pub fn evaluate(
        &self,
        t: f64,
        s: f64,
        f: &GridFunction,
        points: &[[f64; 2]],
        grad: Option<GradientPath>,
    ) -> Result<Evaluation> {
        self.check(t, s, f)?;
        let d = f.dim();
        let order = self.opts.interp_order;
        if t == s {
            let values = sample(f, points, order)?;
            let gradients = match grad {
                None => None,
                Some(_) => {
                    let parts: Vec<Vec<f64>> =
                        (0..d).map(|a| sample(&derivative(f, a), points, order)).collect::<Result<_>>()?;
                    Some((0..points.len()).map(|i| gather_vec(&parts, i)).collect())
                }
            };
            return Ok(Evaluation { values, gradients });
        }
        let params = self.cache.covariance_q(t, s)?;
        let ys = pullback(&params, points, d);
        guard_far_field(f, &ys)?;
        let refine = refinement(&params, &f.grid, self.opts.max_refine);
        let Some(src) = Source::from_function(f, refine)? else {
            return Ok(Evaluation {
                values: vec![0.0; points.len()],
                gradients: grad.map(|_| vec![[0.0; 2]; points.len()]),
            });
        };
        let cut = self.opts.kernel_cut;
        let (values, mut dv) = match grad {
            None => (convolve(&src, &params, cut, false, &ys, order)?.0, None),
            Some(GradientPath::KernelGradient) => {
                let (v, g) = convolve(&src, &params, cut, true, &ys, order)?;
                (v, g)
            }
            Some(GradientPath::DifferentiatedData) => {
                let v = convolve(&src, &params, cut, false, &ys, order)?.0;
                let mut parts = Vec::with_capacity(d);
                for a in 0..d {
                    let df = fd4_derivative(f, a);
                    let part = match Source::from_function(&df, refine)? {
                        Some(dsrc) => convolve(&dsrc, &params, cut, false, &ys, order)?.0,
                        None => vec![0.0; points.len()],
                    };
                    parts.push(part);
                }
                (v, Some((0..points.len()).map(|i| gather_vec(&parts, i)).collect()))
            }
        };
        // D_x [v(U(s,t) x + g)] = U(s,t)^T (D v)(y)
        if let Some(g) = dv.as_mut() {
            let u = &params.u_st;
            for gi in g.iter_mut() {
                let mut out = [0.0; 2];
                for a in 0..d {
                    out[a] = (0..d).map(|b| u[(b, a)] * gi[b]).sum();
                }
                *gi = out;
            }
        }
        Ok(Evaluation { values, gradients: dv })
    }

    pub fn apply(&self, t: f64, s: f64, f: &GridFunction, out: &Grid) -> Result<GridFunction> {
        let pts: Vec<[f64; 2]> = out.points().collect();
        let ev = self.evaluate(t, s, f, &pts, None)?;
        GridFunction::from_values(out, ev.values)
    }

    /// Values at arbitrary points.
    pub fn apply_at(&self, t: f64, s: f64, f: &GridFunction, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        Ok(self.evaluate(t, s, f, points, None)?.values)
    }

    /// The `d` components of `D_x P(t, s) f` on `out`.
    pub fn apply_gradient(
        &self,
        t: f64,
        s: f64,
        f: &GridFunction,
        out: &Grid,
        path: GradientPath,
    ) -> Result<Vec<GridFunction>> {
        let pts: Vec<[f64; 2]> = out.points().collect();
        let ev = self.evaluate(t, s, f, &pts, Some(path))?;
        let g = ev.gradients.expect("gradient requested");
        (0..out.dim()).map(|a| GridFunction::from_values(out, g.iter().map(|v| v[a]).collect())).collect()
    }
}

/// Density of `N(0, Q_{t,s})` at `x` through the Cholesky factor.
pub fn kernel_eval(params: &KernelParams, x: &[f64]) -> f64 {
    let d = params.dim();
    let l = &params.chol;
    // Forward substitution for L z = x; the exponent is -|z|^2 / 2.
    let mut z = [0.0; 8];
    assert!(d <= z.len(), "kernel_eval supports d <= 8");
    for i in 0..d {
        let mut r = x[i];
        for j in 0..i {
            r -= l[(i, j)] * z[j];
        }
        z[i] = r / l[(i, i)];
    }
    let q: f64 = z[..d].iter().map(|v| v * v).sum();
    (-0.5 * q - 0.5 * params.logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()).exp()
}

/// Largest absolute residual of `u_t - L(t) u` at the probe nodes, with a
/// central difference of step `dt` in time and grid differences in space.
pub fn pde_residual_wholespace(
    ws: &WholeSpace,
    t: f64,
    s: f64,
    f: &GridFunction,
    probes: &[usize],
    dt: f64,
) -> Result<f64> {
    if !(t > s + 2.0 * dt) {
        return Err(Error::Domain(format!("residual needs t > s + 2 dt, got t = {t}, s = {s}, dt = {dt}")));
    }
    let g = &f.grid;
    let up = ws.apply(t + dt, s, f, g)?;
    let um = ws.apply(t - dt, s, f, g)?;
    let u = ws.apply(t, s, f, g)?;
    let lu = apply_operator(ws.cache().coeffs(), t, &u);
    Ok(probes.iter().map(|&k| ((up.values[k] - um.values[k]) / (2.0 * dt) - lu.values[k]).abs()).fold(0.0, f64::max))
}

fn gather_vec(parts: &[Vec<f64>], i: usize) -> [f64; 2] {
    let mut v = [0.0; 2];
    for (a, p) in parts.iter().enumerate() {
        v[a] = p[i];
    }
    v
}

fn sample(f: &GridFunction, points: &[[f64; 2]], order: usize) -> Result<Vec<f64>> {
    let d = f.dim();
    points.iter().map(|p| f.interpolate_at(&p[..d], order, Extrapolation::Zero).map(|r| r.0)).collect()
}

fn pullback(params: &KernelParams, points: &[[f64; 2]], d: usize) -> Vec<[f64; 2]> {
    let u = &params.u_st;
    let g = &params.g_ts;
    points
        .iter()
        .map(|x| {
            let mut y = [0.0; 2];
            for i in 0..d {
                y[i] = (0..d).map(|j| u[(i, j)] * x[j]).sum::<f64>() + g[i];
            }
            y
        })
        .collect()
}

/// Refuses far-field zeros when `f` does not decay at its box edge.
fn guard_far_field(f: &GridFunction, ys: &[[f64; 2]]) -> Result<()> {
    let d = f.dim();
    let g = &f.grid;
    if ys.iter().all(|y| g.contains(&y[..d])) {
        return Ok(());
    }
    let peak = f.max_abs();
    let edge =
        (0..f.values.len()).filter(|&k| crate::grid::on_box_edge(g, k)).map(|k| f.values[k].abs()).fold(0.0, f64::max);
    if edge > EDGE_EPS * peak {
        return Err(Error::Config(format!(
            "data is {edge:e} at the box edge and the affine pullback leaves the box; enlarge the truncation box"
        )));
    }
    Ok(())
}

fn refinement(params: &KernelParams, grid: &Grid, max_refine: usize) -> usize {
    let sigma = params.sigma_min();
    let h = grid.h_max();
    if sigma >= 1.5 * h {
        1
    } else {
        ((1.5 * h / sigma).ceil() as usize).clamp(1, max_refine)
    }
}

/// Fourth-order central first derivative, second order within two nodes of
/// the box edge.
fn fd4_derivative(f: &GridFunction, axis: usize) -> GridFunction {
    let mut out = derivative(f, axis);
    let g = &f.grid;
    let n = g.n()[axis];
    let h = g.h()[axis];
    let stride = if axis == 0 { 1 } else { g.n()[0] };
    for k in 0..f.values.len() {
        let i = g.multi_index(k)[axis];
        if i >= 2 && i + 2 < n && f.inside(k) {
            let v = |m: isize| f.values[(k as isize + m * stride as isize) as usize];
            out.values[k] = (-v(2) + 8.0 * v(1) - 8.0 * v(-1) + v(-2)) / (12.0 * h);
        }
    }
    out
}

/// Source samples on a lattice cropped to the numerical support of `f`,
/// refined by `refine` per axis.
struct Source {
    dim: usize,
    lo: [f64; 2],
    h: [f64; 2],
    n: [usize; 2],
    values: Vec<f64>,
}

impl Source {
    fn from_function(f: &GridFunction, refine: usize) -> Result<Option<Source>> {
        let g = &f.grid;
        let d = g.dim();
        let peak = f.max_abs();
        if peak == 0.0 {
            return Ok(None);
        }
        let mut lo_idx = [usize::MAX; 2];
        let mut hi_idx = [0usize; 2];
        for k in 0..f.values.len() {
            if f.values[k].abs() > SUPPORT_EPS * peak {
                let idx = g.multi_index(k);
                for a in 0..d {
                    lo_idx[a] = lo_idx[a].min(idx[a]);
                    hi_idx[a] = hi_idx[a].max(idx[a]);
                }
            }
        }
        let mut lo = [0.0; 2];
        let mut h = [1.0; 2];
        let mut n = [1usize; 2];
        for a in 0..d {
            lo_idx[a] = lo_idx[a].saturating_sub(2);
            hi_idx[a] = (hi_idx[a] + 2).min(g.n()[a] - 1);
            lo[a] = g.coord(a, lo_idx[a]);
            h[a] = g.h()[a] / refine as f64;
            n[a] = (hi_idx[a] - lo_idx[a]) * refine + 1;
        }
        let mut values = Vec::with_capacity(n[0] * n[1]);
        for j in 0..n[1] {
            for i in 0..n[0] {
                let v = if refine == 1 {
                    f.values[g.flat(lo_idx[0] + i, if d == 2 { lo_idx[1] + j } else { 0 })]
                } else {
                    let x = [lo[0] + h[0] * i as f64, lo[1] + h[1] * j as f64];
                    f.interpolate_at(&x[..d], 3, Extrapolation::Zero)?.0
                };
                values.push(v);
            }
        }
        Ok(Some(Source { dim: d, lo, h, n, values }))
    }

    /// Spacing-only stand-in used to report stencil normalization.
    fn dummy(f: &GridFunction, refine: usize) -> Source {
        let d = f.dim();
        let mut h = [1.0; 2];
        for a in 0..d {
            h[a] = f.grid.h()[a] / refine as f64;
        }
        Source { dim: d, lo: [0.0; 2], h, n: [1; 2], values: vec![0.0] }
    }

    fn target_grid(&self, r: &TargetRange) -> Grid {
        let d = self.dim;
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let mut n = vec![0; d];
        for a in 0..d {
            lo[a] = self.lo[a] + self.h[a] * r.start[a] as f64;
            n[a] = r.len[a];
            hi[a] = lo[a] + self.h[a] * (n[a] - 1) as f64;
        }
        Grid::new(&lo, &hi, &n).expect("target range has at least 8 points per axis")
    }
}

struct Stencil {
    radius: usize,
    k: Vec<f64>,
    dk: Vec<f64>,
}

impl Stencil {
    /// Weights `h N(m h; 0, var)` and their derivative for `|m h| <= cut sd`.
    fn new(var: f64, h: f64, cut: f64) -> (Stencil, bool) {
        let sd = var.sqrt();
        let radius = (cut * sd / h).ceil() as usize;
        let norm = h / (2.0 * std::f64::consts::PI * var).sqrt();
        let mut k = Vec::with_capacity(2 * radius + 1);
        let mut dk = Vec::with_capacity(2 * radius + 1);
        for m in 0..=2 * radius {
            let z = (m as f64 - radius as f64) * h;
            let w = norm * (-0.5 * z * z / var).exp();
            k.push(w);
            dk.push(-z / var * w);
        }
        let under = sd < 1.5 * h;
        if under {
            let total: f64 = k.iter().sum();
            k.iter_mut().for_each(|w| *w /= total);
            dk.iter_mut().for_each(|w| *w /= total);
        }
        (Stencil { radius, k, dk }, under)
    }
}

struct Stencils {
    axes: Vec<Stencil>,
    /// Conditional slope `Q12 / Q22` of the first coordinate on the second.
    rho: f64,
    normalized: bool,
}

impl Stencils {
    fn new(params: &KernelParams, src: &Source, cut: f64) -> Stencils {
        let q = &params.q_ts;
        if src.dim == 1 {
            let (s, under) = Stencil::new(q[(0, 0)], src.h[0], cut);
            return Stencils { axes: vec![s], rho: 0.0, normalized: under };
        }
        let q22 = q[(1, 1)];
        let q12 = 0.5 * (q[(0, 1)] + q[(1, 0)]);
        let rho = if q12.abs() <= 1e-14 * (q[(0, 0)] * q22).sqrt() { 0.0 } else { q12 / q22 };
        let cond = q[(0, 0)] - rho * q12;
        let (s1, u1) = Stencil::new(cond, src.h[0], cut);
        let (s2, u2) = Stencil::new(q22, src.h[1], cut);
        Stencils { axes: vec![s1, s2], rho, normalized: u1 || u2 }
    }

    /// Lattice units the first coordinate shifts per unit step on the second.
    fn shift(&self, src: &Source) -> f64 {
        self.rho * src.h[1] / src.h[0]
    }

    /// Reach of the full kernel along each axis, in lattice units.
    fn reach(&self, src: &Source) -> [i64; 2] {
        let mut r = [0i64; 2];
        r[0] = self.axes[0].radius as i64;
        if src.dim == 2 {
            r[1] = self.axes[1].radius as i64;
            r[0] += (self.shift(src).abs() * r[1] as f64).ceil() as i64;
        }
        r
    }
}

struct TargetRange {
    start: [i64; 2],
    len: [usize; 2],
}

/// Lattice box covering the cubic stencils of all `ys`, clipped to the reach
/// of the kernel around the source, at least 8 points per axis.
fn target_range(src: &Source, st: &Stencils, ys: &[[f64; 2]]) -> Option<TargetRange> {
    let d = src.dim;
    let reach = st.reach(src);
    let mut start = [0i64; 2];
    let mut len = [1usize; 2];
    for a in 0..d {
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in ys {
            ymin = ymin.min(y[a]);
            ymax = ymax.max(y[a]);
        }
        let lo = (((ymin - src.lo[a]) / src.h[a]).floor() as i64 - 2).max(-reach[a] - 2);
        let hi = (((ymax - src.lo[a]) / src.h[a]).ceil() as i64 + 2).min(src.n[a] as i64 - 1 + reach[a] + 2);
        if hi < lo {
            return None;
        }
        let mut n = (hi - lo + 1) as usize;
        let mut lo = lo;
        if n < crate::grid::MIN_POINTS {
            lo -= (crate::grid::MIN_POINTS - n) as i64;
            n = crate::grid::MIN_POINTS;
        }
        start[a] = lo;
        len[a] = n;
    }
    Some(TargetRange { start, len })
}

/// `k * f` (and its gradient) sampled at `ys` by interpolation on the target
/// lattice.
fn convolve(
    src: &Source,
    params: &KernelParams,
    cut: f64,
    grad: bool,
    ys: &[[f64; 2]],
    order: usize,
) -> Result<(Vec<f64>, Option<Vec<[f64; 2]>>)> {
    let st = Stencils::new(params, src, cut);
    let Some(range) = target_range(src, &st, ys) else {
        return Ok((vec![0.0; ys.len()], grad.then(|| vec![[0.0; 2]; ys.len()])));
    };
    let fields = if src.dim == 1 { conv_1d(src, &st, &range, grad) } else { conv_2d(src, &st, &range, grad) };
    let tg = src.target_grid(&range);
    let d = src.dim;
    let funcs: Vec<GridFunction> =
        fields.into_iter().map(|v| GridFunction::from_values(&tg, v)).collect::<Result<_>>()?;
    let interp = |f: &GridFunction| -> Vec<f64> {
        ys.par_iter()
            .map(|y| f.interpolate_at(&y[..d], order, Extrapolation::Zero).map(|r| r.0).unwrap_or(0.0))
            .collect()
    };
    let values = interp(&funcs[0]);
    let gradients = grad.then(|| {
        let parts: Vec<Vec<f64>> = funcs[1..].iter().map(interp).collect();
        (0..ys.len()).map(|i| gather_vec(&parts, i)).collect()
    });
    Ok((values, gradients))
}

fn conv_1d(src: &Source, st: &Stencils, range: &TargetRange, grad: bool) -> Vec<Vec<f64>> {
    let s = &st.axes[0];
    let r = s.radius as i64;
    let n = src.n[0] as i64;
    let run = |w: &[f64]| -> Vec<f64> {
        (0..range.len[0])
            .into_par_iter()
            .map(|i| {
                let gi = range.start[0] + i as i64;
                let j0 = (gi - r).max(0);
                let j1 = (gi + r).min(n - 1);
                let mut acc = 0.0;
                for j in j0..=j1 {
                    acc += w[(gi - j + r) as usize] * src.values[j as usize];
                }
                acc
            })
            .collect()
    };
    let mut out = vec![run(&s.k)];
    if grad {
        out.push(run(&s.dk));
    }
    out
}

fn conv_2d(src: &Source, st: &Stencils, range: &TargetRange, grad: bool) -> Vec<Vec<f64>> {
    let (s1, s2) = (&st.axes[0], &st.axes[1]);
    let (r1, r2) = (s1.radius as i64, s2.radius as i64);
    let (n1, n2) = (src.n[0] as i64, src.n[1] as i64);
    let delta = st.shift(src);
    let pad = (delta.abs() * r2 as f64).ceil() as i64 + 2;
    let a_start = range.start[0] - pad;
    let a_len = range.len[0] + 2 * pad as usize;

    // First pass along x1 for every source row, over the widened x1 range.
    let pass1 = |w: &[f64]| -> Vec<Vec<f64>> {
        (0..n2 as usize)
            .into_par_iter()
            .map(|j2| {
                let row = &src.values[j2 * n1 as usize..(j2 + 1) * n1 as usize];
                (0..a_len)
                    .map(|i| {
                        let gi = a_start + i as i64;
                        let j0 = (gi - r1).max(0);
                        let j1 = (gi + r1).min(n1 - 1);
                        let mut acc = 0.0;
                        for j in j0..=j1 {
                            acc += w[(gi - j + r1) as usize] * row[j as usize];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let w = pass1(&s1.k);
    let w1 = grad.then(|| pass1(&s1.dk));

    // Row value at fractional lattice position p (relative to a_start).
    let at = |row: &[f64], p: f64| -> f64 {
        if delta == 0.0 {
            return row[p.round() as usize];
        }
        let base = p.floor() as i64 - 1;
        let u = p - (base as f64);
        let mut acc = 0.0;
        for m in 0..4i64 {
            let idx = base + m;
            if idx < 0 || idx >= row.len() as i64 {
                continue;
            }
            let mut l = 1.0;
            for k in 0..4i64 {
                if k != m {
                    l *= (u - k as f64) / ((m - k) as f64);
                }
            }
            acc += l * row[idx as usize];
        }
        acc
    };

    let len1 = range.len[0];
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..range.len[1])
        .into_par_iter()
        .map(|i2| {
            let gi2 = range.start[1] + i2 as i64;
            let j0 = (gi2 - r2).max(0);
            let j1 = (gi2 + r2).min(n2 - 1);
            let mut v = vec![0.0; len1];
            let mut g1 = vec![0.0; if grad { len1 } else { 0 }];
            let mut g2 = vec![0.0; if grad { len1 } else { 0 }];
            for j2 in j0..=j1 {
                let m = gi2 - j2;
                let k2 = s2.k[(m + r2) as usize];
                let dk2 = s2.dk[(m + r2) as usize];
                let row = &w[j2 as usize];
                for i1 in 0..len1 {
                    let p = (range.start[0] + i1 as i64 - a_start) as f64 - delta * m as f64;
                    let wp = at(row, p);
                    v[i1] += k2 * wp;
                    if let Some(w1) = &w1 {
                        g1[i1] += k2 * at(&w1[j2 as usize], p);
                        g2[i1] += dk2 * wp;
                    }
                }
            }
            if grad {
                for i1 in 0..len1 {
                    g2[i1] -= st.rho * g1[i1];
                }
            }
            (v, g1, g2)
        })
        .collect();
    let mut v = Vec::with_capacity(len1 * range.len[1]);
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for (a, b, c) in rows {
        v.extend(a);
        g1.extend(b);
        g2.extend(c);
    }
    if grad {
        vec![v, g1, g2]
    } else {
        vec![v]
    }
}
