//! Estimate-verification harness: power-law fits, smoothing and Sobolev
//! probes, the iterated-convolution demo and a Monte Carlo cross-check of
//! the kernel covariance.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;

use crate::bounded::BoundedProblem;
use crate::coefficients::{CoefficientSet, DriftSpec, FamilySpec};
use crate::error::{Error, Result};
use crate::exterior::{Exterior, ExteriorOptions};
use crate::grid::{gaussian_bump, gradient, lp_norm, lp_norm_vec, sobolev_seminorms, DomainSpec, Grid, GridFunction};
use crate::propagator::PropagatorCache;
use crate::quadrature::GaussLegendre;
use crate::wholespace::{ApplyOptions, WholeSpace};

/// Smallest admissible coefficient of determination for a passing fit.
pub const MIN_R_SQUARED: f64 = 0.98;

/// Least-squares fit of `log value = log C + slope log gap`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub pairs: Vec<(f64, f64)>,
    pub fitted_slope: f64,
    pub fitted_log_c: f64,
    pub r_squared: f64,
    pub target_slope: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn rate_fit(samples: &[(f64, f64)], target_slope: f64, tol: f64) -> Result<RateReport> {
    if samples.len() < 6 {
        return Err(Error::Data(format!("a rate fit needs at least 6 samples, got {}", samples.len())));
    }
    if let Some(&(g, v)) = samples.iter().find(|(g, v)| !(*g > 0.0 && *v > 0.0 && g.is_finite() && v.is_finite())) {
        return Err(Error::Data(format!("rate samples must be positive and finite, got ({g}, {v})")));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &(g, _)| (lo.min(g), hi.max(g)));
    if (hi / lo).log10() < 1.5 - 1e-12 {
        return Err(Error::Data(format!("gaps must span at least 1.5 decades, got [{lo}, {hi}]")));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let log_c = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - log_c - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RateReport {
        pairs: samples.to_vec(),
        fitted_slope: slope,
        fitted_log_c: log_c,
        r_squared,
        target_slope,
        tolerance: tol,
        pass: (slope - target_slope).abs() <= tol && r_squared >= MIN_R_SQUARED,
    })
}

/// `n` gaps log-spaced over `[lo, hi]`.
pub fn log_gaps(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1).max(1) as f64)).collect()
}

/// Which evolution a probe runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Wholespace,
    Bounded,
    Exterior,
}

impl std::str::FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wholespace" => Ok(System::Wholespace),
            "bounded" => Ok(System::Bounded),
            "exterior" => Ok(System::Exterior),
            _ => Err(Error::Config(format!("unknown system '{s}', expected wholespace, bounded or exterior"))),
        }
    }
}

/// Everything needed to build any of the three evolutions on one grid.
#[derive(Clone)]
pub struct Setup {
    pub system: System,
    pub coeffs: CoefficientSet,
    pub grid: Grid,
    /// Obstacle geometry for the exterior system.
    pub domain: DomainSpec,
    /// Radius of the ball used as the bounded domain.
    pub bounded_radius: f64,
    pub ode_tol: f64,
    pub quad_nodes: usize,
    pub apply: ApplyOptions,
    pub exterior: ExteriorOptions,
    /// Cap on the θ-scheme step; each evolution also uses at most `(t - s) / 20`.
    pub dt: f64,
    pub theta: f64,
}

impl Setup {
    pub fn new(system: System, coeffs: CoefficientSet, grid: Grid) -> Self {
        Setup {
            system,
            coeffs,
            grid,
            domain: DomainSpec::default(),
            bounded_radius: 5.0,
            ode_tol: 1e-10,
            quad_nodes: 8,
            apply: ApplyOptions::default(),
            exterior: ExteriorOptions::default(),
            dt: 1e-3,
            theta: 0.5,
        }
    }

    fn step(&self, gap: f64) -> f64 {
        self.dt.min(gap / 20.0)
    }

    pub fn wholespace(&self) -> Result<WholeSpace> {
        WholeSpace::new(
            std::sync::Arc::new(PropagatorCache::new(self.coeffs.clone(), self.ode_tol, self.quad_nodes)?),
            self.apply,
        )
    }

    pub fn bounded_mask(&self) -> Vec<bool> {
        (0..self.grid.len()).map(|k| self.grid.radius(k) < self.bounded_radius).collect()
    }

    pub fn bounded(&self, gap: f64) -> Result<BoundedProblem> {
        BoundedProblem::new(self.coeffs.clone(), &self.grid, self.bounded_mask(), self.theta, self.step(gap))
    }

    pub fn exterior_problem(&self, gap: f64) -> Result<Exterior> {
        let opts = ExteriorOptions { dt: self.step(gap), theta: self.theta, ..self.exterior };
        Exterior::new(self.coeffs.clone(), self.domain, &self.grid, self.ode_tol, self.quad_nodes, opts)
    }

    /// `f` restricted to the domain of the selected system.
    pub fn restrict(&self, f: &GridFunction) -> GridFunction {
        match self.system {
            System::Wholespace => f.clone(),
            System::Bounded => plain(f).with_mask(self.bounded_mask()),
            System::Exterior => plain(f).with_mask(self.domain.omega_mask(&self.grid)),
        }
    }

    /// `P(t,s) f` for the selected system.
    pub fn evolve(&self, t: f64, s: f64, f: &GridFunction) -> Result<GridFunction> {
        let f = self.restrict(f);
        match self.system {
            System::Wholespace => self.wholespace()?.apply(t, s, &f, &self.grid),
            System::Bounded => self.bounded(t - s)?.evolve(t, s, &f),
            System::Exterior => Ok(self.exterior_problem(t - s)?.picard_apply(t, s, &f)?.0),
        }
    }
}

fn plain(f: &GridFunction) -> GridFunction {
    GridFunction { grid: f.grid.clone(), values: f.values.clone(), mask: None }
}

/// Probe data for rate fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFamily {
    /// Gaussian of width `max(min_cells h, sqrt(gap))` at `center`: the
    /// extremal data for the smoothing bounds at each gap.
    ScaleMatched { center: Vec<f64>, min_cells: f64 },
    /// Gaussian of fixed width at `center`.
    Fixed { center: Vec<f64>, width: f64 },
}

impl DataFamily {
    pub fn sample(&self, grid: &Grid, gap: f64) -> GridFunction {
        match self {
            DataFamily::ScaleMatched { center, min_cells } => {
                gaussian_bump(grid, center, (min_cells * grid.h_max()).max(gap.sqrt()))
            }
            DataFamily::Fixed { center, width } => gaussian_bump(grid, center, *width),
        }
    }
}

/// `f` over every gap in parallel, results in gap order.
pub fn map_gaps<T: Send, F: Fn(f64) -> Result<T> + Sync>(gaps: &[f64], f: F) -> Result<Vec<T>> {
    gaps.par_iter().map(|&g| f(g)).collect()
}

/// `||P(s + gap, s) f||_q / ||f||_p` over `gaps`, fitted against
/// `-(d/2)(1/p - 1/q)`.
pub fn verify_smoothing(
    setup: &Setup,
    p: f64,
    q: f64,
    data: &DataFamily,
    s: f64,
    gaps: &[f64],
    tol: f64,
) -> Result<RateReport> {
    check_exponents(p, q)?;
    let d = setup.grid.dim() as f64;
    let samples = gaps
        .par_iter()
        .map(|&gap| {
            let f = setup.restrict(&data.sample(&setup.grid, gap));
            let u = setup.evolve(s + gap, s, &f)?;
            Ok((gap, lp_norm(&u, q) / lp_norm(&f, p)))
        })
        .collect::<Result<Vec<_>>>()?;
    rate_fit(&samples, -0.5 * d * (1.0 / p - 1.0 / q), tol)
}

/// `||D P(s + gap, s) f||_p / ||f||_p` over `gaps`, fitted against `-1/2`.
pub fn verify_gradient_rate(
    setup: &Setup,
    p: f64,
    data: &DataFamily,
    s: f64,
    gaps: &[f64],
    tol: f64,
) -> Result<RateReport> {
    check_exponents(p, p)?;
    let samples = gaps
        .par_iter()
        .map(|&gap| {
            let f = setup.restrict(&data.sample(&setup.grid, gap));
            let u = setup.evolve(s + gap, s, &f)?;
            Ok((gap, lp_norm_vec(&gradient(&u), p) / lp_norm(&f, p)))
        })
        .collect::<Result<Vec<_>>>()?;
    rate_fit(&samples, -0.5, tol)
}

fn check_exponents(p: f64, q: f64) -> Result<()> {
    if !(p > 1.0 && q >= p && q.is_finite()) {
        return Err(Error::Domain(format!("need 1 < p <= q < inf, got p = {p}, q = {q}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevRow {
    pub gap: f64,
    /// `||P f||_{k,p} / ||f||_{k,p}`.
    pub stability: f64,
    /// `(t - s)^{1/2} ||P f||_{2,p} / ||f||_{1,p}`.
    pub smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevReport {
    pub k: usize,
    pub p: f64,
    pub rows: Vec<SobolevRow>,
    /// Empirical `C(T)` for the stability bound.
    pub sup_stability: f64,
    /// Empirical `C(T)` for the smoothing bound.
    pub sup_smoothing: f64,
}

pub fn verify_sobolev_stability(
    setup: &Setup,
    k: usize,
    p: f64,
    f: &GridFunction,
    s: f64,
    gaps: &[f64],
) -> Result<SobolevReport> {
    if !(k == 1 || k == 2) {
        return Err(Error::Domain(format!("k must be 1 or 2, got {k}")));
    }
    let f = setup.restrict(f);
    let nf = sobolev_seminorms(&f, p);
    let rows = gaps
        .par_iter()
        .map(|&gap| {
            if nf.norm(k) == 0.0 {
                return Ok(SobolevRow { gap, stability: 0.0, smoothing: 0.0 });
            }
            let u = sobolev_seminorms(&setup.evolve(s + gap, s, &f)?, p);
            Ok(SobolevRow { gap, stability: u.norm(k) / nf.norm(k), smoothing: gap.sqrt() * u.norm(2) / nf.norm(1) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SobolevReport {
        k,
        p,
        sup_stability: rows.iter().map(|r| r.stability).fold(0.0, f64::max),
        sup_smoothing: rows.iter().map(|r| r.smoothing).fold(0.0, f64::max),
        rows,
    })
}

/// Fit of `||F(s + gap, s) f|| / ||f|| = a + b gap^gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub pairs: Vec<(f64, f64)>,
    /// Smallest `C` with `value <= C (1 + gap^{-1/2})` at every sample.
    pub bound_c: f64,
    pub fitted_exponent: f64,
    pub fitted_a: f64,
    pub fitted_b: f64,
    /// Largest relative misfit of the three-parameter model.
    pub max_rel_misfit: f64,
    pub target_exponent: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Measures the correction operator over `gaps` and fits its singular part.
pub fn f_singularity_fit(setup: &Setup, f: &GridFunction, s: f64, gaps: &[f64], tol: f64) -> Result<SingularityReport> {
    let p = setup.exterior.p;
    let f = setup.restrict(f);
    let nf = lp_norm(&f, p);
    if nf == 0.0 {
        return Err(Error::Data("singularity probe needs nonzero data".into()));
    }
    let pairs = gaps
        .par_iter()
        .map(|&gap| {
            let ex = setup.exterior_problem(gap)?;
            Ok((gap, lp_norm(&ex.apply_f(s + gap, s, &f)?, p) / nf))
        })
        .collect::<Result<Vec<_>>>()?;
    let bound_c = pairs.iter().map(|&(g, v)| v / (1.0 + g.powf(-0.5))).fold(0.0, f64::max);
    let (gamma, a, b, misfit) = fit_offset_power(&pairs);
    Ok(SingularityReport {
        bound_c,
        fitted_exponent: gamma,
        fitted_a: a,
        fitted_b: b,
        max_rel_misfit: misfit,
        target_exponent: -0.5,
        tolerance: tol,
        pass: bound_c.is_finite() && (gamma + 0.5).abs() <= tol,
        pairs,
    })
}

/// Relative least squares for `v = a + b g^gamma`: linear in `(a, b)` for
/// fixed `gamma`, golden-section search over `gamma` in `[-2, 2]`.
fn fit_offset_power(pairs: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let solve = |gamma: f64| -> (f64, f64, f64) {
        // weights 1/v^2 make the residual relative
        let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(g, v) in pairs {
            let w = 1.0 / (v * v).max(f64::MIN_POSITIVE);
            let x = g.powf(gamma);
            s11 += w;
            s12 += w * x;
            s22 += w * x * x;
            r1 += w * v;
            r2 += w * x * v;
        }
        let det = s11 * s22 - s12 * s12;
        let (a, b) = if det.abs() > 1e-300 {
            ((r1 * s22 - r2 * s12) / det, (s11 * r2 - s12 * r1) / det)
        } else {
            (r1 / s11, 0.0)
        };
        let sse = pairs.iter().map(|&(g, v)| ((a + b * g.powf(gamma) - v) / v).powi(2)).sum();
        (a, b, sse)
    };
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (-2.0f64, 2.0f64);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (solve(x1).2, solve(x2).2);
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = solve(x1).2;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = solve(x2).2;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let (a, b, _) = solve(gamma);
    let misfit = pairs.iter().map(|&(g, v)| ((a + b * g.powf(gamma) - v) / v).abs()).fold(0.0, f64::max);
    (gamma, a, b, misfit)
}

/// Scalar instance of the iterated time convolution with kernels
/// `R = C0 (t-s)^alpha`, `S = C0 (t-s)^beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma32Report {
    pub alpha: f64,
    pub beta: f64,
    pub c0: f64,
    pub gap: f64,
    /// `T_n(t,s)` from the Beta-function recursion.
    pub term_bounds: Vec<f64>,
    /// `T_n(t,s)` by nested Gauss–Legendre quadrature.
    pub quadrature_terms: Vec<f64>,
    /// Largest relative disagreement over the terms with a quadrature value.
    pub max_rel_diff: f64,
    pub series_bound: f64,
    /// Ratios `T_{n+1} / T_n` strictly decrease from `n = 4` on.
    pub super_geometric: bool,
    /// The series converges uniformly up to the diagonal (`alpha >= 0`).
    pub uniform_flag: bool,
}

/// Deepest level evaluated by nested quadrature; the cost is `nodes^n`.
pub const LEMMA32_QUAD_DEPTH: usize = 6;

pub fn lemma32_demo(
    alpha: f64,
    beta_exp: f64,
    c0: f64,
    gap: f64,
    n_terms: usize,
    nodes: usize,
) -> Result<Lemma32Report> {
    if !(alpha > -1.0 && beta_exp > -1.0) {
        return Err(Error::Domain(format!("alpha and beta must exceed -1, got {alpha}, {beta_exp}")));
    }
    if !(c0 > 0.0 && gap > 0.0) || n_terms == 0 || nodes < 2 {
        return Err(Error::Domain("need c0 > 0, gap > 0, n_terms >= 1 and nodes >= 2".into()));
    }
    let mut coef = c0;
    let mut term_bounds = Vec::with_capacity(n_terms);
    for n in 0..n_terms {
        if n > 0 {
            coef *= c0 * beta(beta_exp + 1.0, alpha + 1.0 + (n - 1) as f64 * (beta_exp + 1.0));
        }
        term_bounds.push(coef * gap.powf(alpha + n as f64 * (beta_exp + 1.0)));
    }
    let rule = GaussLegendre::new(nodes);
    let depth = LEMMA32_QUAD_DEPTH.min(n_terms - 1);
    let quadrature_terms: Vec<f64> = (0..=depth).map(|n| nested_term(&rule, n, alpha, beta_exp, c0, gap)).collect();
    let max_rel_diff = quadrature_terms.iter().zip(&term_bounds).map(|(q, b)| ((q - b) / b).abs()).fold(0.0, f64::max);
    let ratios: Vec<f64> = term_bounds.windows(2).map(|w| w[1] / w[0]).collect();
    let super_geometric = ratios.len() > 5 && ratios[4..].windows(2).all(|w| w[1] < w[0]);
    Ok(Lemma32Report {
        alpha,
        beta: beta_exp,
        c0,
        gap,
        series_bound: term_bounds.iter().sum(),
        term_bounds,
        quadrature_terms,
        max_rel_diff,
        super_geometric,
        uniform_flag: alpha >= 0.0,
    })
}

/// `T_n(t, s)` with `t - s = gap`, by recursion on `int_s^t T_{n-1}(t,r) S(r,s) dr`
/// under `r = s + gap sin^2(theta)`.
fn nested_term(rule: &GaussLegendre, n: usize, alpha: f64, beta_exp: f64, c0: f64, gap: f64) -> f64 {
    if n == 0 {
        return c0 * gap.powf(alpha);
    }
    let (theta, w) = rule.mapped(0.0, std::f64::consts::FRAC_PI_2);
    theta
        .iter()
        .zip(&w)
        .map(|(&th, &wi)| {
            let (sn, cs) = th.sin_cos();
            let r_minus_s = gap * sn * sn;
            let t_minus_r = gap * cs * cs;
            let jac = 2.0 * gap * sn * cs;
            wi * jac * nested_term(rule, n - 1, alpha, beta_exp, c0, t_minus_r) * c0 * r_minus_s.powf(beta_exp)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// `|m(t) - (U(s,t) x + g(t,s))| / max(1, |U(s,t) x + g(t,s)|)` against an
    /// independently integrated mean ODE.
    pub mean_err: f64,
    /// `||S - Q_{t,s}||_F / ||Q_{t,s}||_F` for the sample covariance `S`.
    pub cov_err: f64,
    /// Largest `|mean Z_i| / sqrt(S_ii / n)`.
    pub z_mean_sigmas: f64,
    pub tolerance: f64,
    pub sample_cov: Vec<Vec<f64>>,
    pub exact_cov: Vec<Vec<f64>>,
    pub pass: bool,
}

/// Paths per independently seeded stream; fixed so that results do not depend
/// on the worker count.
const MC_CHUNK: usize = 1024;

/// Simulates `Z = sum_j U(s,r_j) Q(r_j) sqrt(dr) xi_j` and compares its sample
/// covariance with `Q_{t,s}`.
pub fn mc_covariance_check(
    cache: &PropagatorCache,
    x: &[f64],
    t: f64,
    s: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<McReport> {
    let coeffs = cache.coeffs();
    let d = coeffs.dim();
    if n_paths < 10_000 || n_steps == 0 || !(t > s) || x.len() != d {
        return Err(Error::Domain(format!("need n_paths >= 1e4, n_steps >= 1, t > s and a {d}-vector start point")));
    }
    let dr = (t - s) / n_steps as f64;
    // independent RK4 for V' = V M, m' = V (M x + c) on the Euler–Maruyama grid
    let x0 = DVector::from_column_slice(x);
    let mut v = DMatrix::<f64>::identity(d, d);
    let mut m = x0.clone();
    let mut b = Vec::with_capacity(n_steps);
    let rhs = |r: f64, v: &DMatrix<f64>| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mm = coeffs.try_m(r)?;
        Ok((v * &mm, v * (&mm * &x0 + coeffs.try_c(r)?)))
    };
    for j in 0..n_steps {
        let r = s + j as f64 * dr;
        b.push(&v * coeffs.try_q(r)? * dr.sqrt());
        let (k1v, k1m) = rhs(r, &v)?;
        let v2 = &v + &k1v * (0.5 * dr);
        let (k2v, k2m) = rhs(r + 0.5 * dr, &v2)?;
        let v3 = &v + &k2v * (0.5 * dr);
        let (k3v, k3m) = rhs(r + 0.5 * dr, &v3)?;
        let v4 = &v + &k3v * dr;
        let (k4v, k4m) = rhs(r + dr, &v4)?;
        v += (&k1v + &k2v * 2.0 + &k3v * 2.0 + &k4v) * (dr / 6.0);
        m += (&k1m + &k2m * 2.0 + &k3m * 2.0 + &k4m) * (dr / 6.0);
    }
    let n_chunks = n_paths.div_ceil(MC_CHUNK);
    let partial: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = MC_CHUNK.min(n_paths - c * MC_CHUNK);
            let mut sum = DVector::zeros(d);
            let mut sq = DMatrix::zeros(d, d);
            let mut xi = DVector::zeros(d);
            let mut z = DVector::zeros(d);
            for _ in 0..count {
                z.fill(0.0);
                for bj in &b {
                    for a in 0..d {
                        xi[a] = StandardNormal.sample(&mut rng);
                    }
                    z.gemv(1.0, bj, &xi, 1.0);
                }
                sum += &z;
                sq.ger(1.0, &z, &z, 1.0);
            }
            (sum, sq)
        })
        .collect();
    let (sum, sq) =
        partial.into_iter().fold((DVector::zeros(d), DMatrix::zeros(d, d)), |(a, b), (c, e)| (a + c, b + e));
    let n = n_paths as f64;
    let mean = &sum / n;
    let sample = (&sq - &mean * mean.transpose() * n) / (n - 1.0);
    let exact = cache.covariance_raw(t, s)?;
    let flow = cache.flow_u(s, t)? * &x0 + cache.drift_g(t, s)?;
    let mean_err = (&m - &flow).norm() / flow.norm().max(1.0);
    let cov_err = (&sample - &exact).norm() / exact.norm();
    let z_mean_sigmas = (0..d).map(|a| mean[a].abs() / (sample[(a, a)] / n).sqrt()).fold(0.0, f64::max);
    let tolerance = 5.0 / n.sqrt();
    let rows = |a: &DMatrix<f64>| (0..d).map(|i| (0..d).map(|j| a[(i, j)]).collect()).collect();
    Ok(McReport {
        n_paths,
        n_steps,
        seed,
        mean_err,
        cov_err,
        z_mean_sigmas,
        tolerance,
        sample_cov: rows(&sample),
        exact_cov: rows(&exact),
        pass: cov_err <= tolerance && mean_err <= 1e-6 && z_mean_sigmas <= 5.0,
    })
}

/// Relative `L^2` defect of `P(t,r) P(r,s) f` against `P(t,s) f`.
pub fn ck_defect(setup: &Setup, t: f64, r: f64, s: f64, f: &GridFunction) -> Result<f64> {
    let direct = setup.evolve(t, s, f)?;
    let mid = setup.evolve(r, s, f)?;
    let composed = setup.evolve(t, r, &mid)?;
    let norm = lp_norm(&direct, 2.0);
    if norm == 0.0 {
        return Ok(lp_norm(&composed, 2.0));
    }
    Ok(lp_norm(&composed.sub(&direct), 2.0) / norm)
}

/// `U(t,s)`, `g(t,s)` and `Q_{t,s}` in closed form; `None` where the family
/// has none (a non-symmetric generator, or a time-dependent rate combined
/// with a drift or a covariance integral).
#[derive(Clone, Debug)]
pub struct ClosedForm {
    pub u: DMatrix<f64>,
    pub g: Option<DVector<f64>>,
    pub q: Option<DMatrix<f64>>,
}

pub fn closed_form_propagator(spec: &FamilySpec, t: f64, s: f64) -> Option<ClosedForm> {
    let tau = t - s;
    let quad = 0.5 * (t * t - s * s);
    let drift = |d: usize, drift: &Option<DriftSpec>| -> (DVector<f64>, DVector<f64>) {
        match drift {
            Some(dr) => {
                (DVector::from_vec(dr.c0.clone()), DVector::from_vec(dr.c1.clone().unwrap_or_else(|| vec![0.0; d])))
            }
            None => (DVector::zeros(d), DVector::zeros(d)),
        }
    };
    match spec {
        FamilySpec::Heat { sigma, dim, drift: dr } => {
            let (c0, c1) = drift(*dim, dr);
            Some(ClosedForm {
                u: DMatrix::identity(*dim, *dim),
                g: Some(c0 * tau + c1 * quad),
                q: Some(DMatrix::identity(*dim, *dim) * (sigma * sigma * tau)),
            })
        }
        FamilySpec::ScalarCommuting { rate, slope, generator, sigma, dim, drift: dr } => {
            let d = *dim;
            let gen = match generator {
                Some(rows) => DMatrix::from_fn(d, d, |i, j| rows[i][j]),
                None => DMatrix::identity(d, d),
            };
            if (&gen - gen.transpose()).norm() > 0.0 {
                return None;
            }
            let eig = gen.symmetric_eigen();
            let v = &eig.eigenvectors;
            let area = rate * tau + slope * quad;
            let diag = |f: &dyn Fn(f64) -> f64| DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            let u = v * diag(&|l| (-l * area).exp()) * v.transpose();
            if *slope != 0.0 {
                return Some(ClosedForm { u, g: None, q: None });
            }
            let q =
                v * diag(&|l| {
                    exp_affine_integral(
                        Complex::new(2.0 * l * rate, 0.0),
                        tau,
                        Complex::new(1.0, 0.0),
                        Complex::new(0.0, 0.0),
                    )
                    .re
                }) * v.transpose()
                    * (sigma * sigma);
            let (c0, c1) = drift(d, dr);
            let (h0, h1) = (v.transpose() * (c0 + &c1 * s), v.transpose() * c1);
            let gh = DVector::from_fn(d, |i, _| {
                let k = Complex::new(eig.eigenvalues[i] * rate, 0.0);
                exp_affine_integral(k, tau, Complex::new(h0[i], 0.0), Complex::new(h1[i], 0.0)).re
            });
            Some(ClosedForm { u, g: Some(v * gh), q: Some(q) })
        }
        FamilySpec::Rotation { omega, omega_slope, sigma, drift: dr } => {
            let theta = omega * tau + omega_slope * quad;
            // U(t,s) = exp(-theta J) with J = [[0, -1], [1, 0]].
            let u = DMatrix::from_row_slice(2, 2, &[theta.cos(), theta.sin(), -theta.sin(), theta.cos()]);
            let q = Some(DMatrix::identity(2, 2) * (sigma * sigma * tau));
            let (c0, c1) = drift(2, dr);
            let g = if *omega_slope == 0.0 || (c0.norm() == 0.0 && c1.norm() == 0.0) {
                // exp(x J) v corresponds to e^{ix} (v_0 + i v_1).
                let a = Complex::new(c0[0] + c1[0] * s, c0[1] + c1[1] * s);
                let b = Complex::new(c1[0], c1[1]);
                let z = exp_affine_integral(Complex::new(0.0, *omega), tau, a, b);
                Some(DVector::from_vec(vec![z.re, z.im]))
            } else {
                None
            };
            Some(ClosedForm { u, g, q })
        }
        FamilySpec::Custom(_) => None,
    }
}

/// `int_0^tau e^{k x} (a + b x) dx`.
fn exp_affine_integral(k: Complex<f64>, tau: f64, a: Complex<f64>, b: Complex<f64>) -> Complex<f64> {
    let z = k * tau;
    if z.norm() < 0.5 {
        // sum_n k^n tau^{n+1} / n! (a / (n+1) + b tau / (n+2))
        let mut term = Complex::new(tau, 0.0);
        let mut sum = Complex::new(0.0, 0.0);
        for n in 0..40 {
            let nf = n as f64;
            sum += term * (a / (nf + 1.0) + b * (tau / (nf + 2.0)));
            term = term * z / (nf + 1.0);
        }
        return sum;
    }
    let e = z.exp();
    let e1 = (e - 1.0) / k;
    let e2 = e * tau / k - (e - 1.0) / (k * k);
    a * e1 + b * e2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_match_the_propagator() {
        use crate::coefficients::builtin_family;
        let specs = [
            r#"{"family": "heat", "sigma": 1.5, "dim": 2, "drift": {"c0": [1.0, -0.5], "c1": [0.25, 0.0]}}"#,
            r#"{"family": "scalar_commuting", "rate": 0.7, "dim": 2, "generator": [[1.0, 0.3], [0.3, -0.5]], "drift": {"c0": [1.0, 0.0], "c1": [0.0, 2.0]}}"#,
            r#"{"family": "scalar_commuting", "rate": 1.0, "slope": 0.5, "dim": 1}"#,
            r#"{"family": "rotation", "omega": 1.3, "drift": {"c0": [0.5, 1.0], "c1": [1.0, 0.0]}}"#,
            r#"{"family": "rotation", "omega": 0.4, "omega_slope": 1.0, "sigma": 0.8}"#,
        ];
        for text in specs {
            let spec: FamilySpec = serde_json::from_str(text).unwrap();
            let cache = PropagatorCache::new(builtin_family(&spec, 2.0).unwrap(), 1e-11, 8).unwrap();
            let cf = closed_form_propagator(&spec, 1.7, 0.4).unwrap();
            let u = cache.flow_u(1.7, 0.4).unwrap();
            assert!((&u - &cf.u).norm() <= 1e-8 * cf.u.norm(), "{text}: U");
            if let Some(g) = cf.g {
                let gc = cache.drift_g(1.7, 0.4).unwrap();
                assert!((&gc - &g).norm() <= 1e-8 * g.norm().max(1.0), "{text}: g {gc} {g}");
            }
            if let Some(q) = cf.q {
                let qc = &cache.covariance_q(1.7, 0.4).unwrap().q_ts;
                assert!((qc - &q).norm() <= 1e-8 * q.norm(), "{text}: Q");
            }
        }
        // scalar rate 1, unit noise: Q_{1,0} = (e^2 - 1) / 2.
        let spec: FamilySpec =
            serde_json::from_str(r#"{"family": "scalar_commuting", "rate": 1.0, "dim": 1}"#).unwrap();
        let q = closed_form_propagator(&spec, 1.0, 0.0).unwrap().q.unwrap()[(0, 0)];
        assert!((q - 3.194528).abs() < 1e-6);
    }

    #[test]
    fn synthetic_power_laws() {
        let gaps = log_gaps(1e-3, 1.0, 10);
        let s: Vec<_> = gaps.iter().map(|&g| (g, g.powf(-0.5))).collect();
        let r = rate_fit(&s, -0.5, 1e-10).unwrap();
        assert!((r.fitted_slope + 0.5).abs() < 1e-10 && (r.r_squared - 1.0).abs() < 1e-12 && r.pass);
        let s: Vec<_> = gaps.iter().map(|&g| (g, 3.0 * g.powf(-0.125))).collect();
        let r = rate_fit(&s, -0.125, 1e-10).unwrap();
        assert!((r.fitted_slope + 0.125).abs() < 1e-10);
        assert!((r.fitted_log_c - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn rate_fit_rejects_bad_samples() {
        let gaps = log_gaps(1e-3, 1.0, 8);
        let mut s: Vec<_> = gaps.iter().map(|&g| (g, g)).collect();
        s[3].1 = 0.0;
        assert!(matches!(rate_fit(&s, 1.0, 0.1), Err(Error::Data(_))));
        assert!(rate_fit(&s[..5], 1.0, 0.1).is_err());
        let narrow: Vec<_> = log_gaps(0.1, 1.0, 8).iter().map(|&g| (g, g)).collect();
        assert!(rate_fit(&narrow, 1.0, 0.1).is_err());
    }

    #[test]
    fn pass_requires_good_fit() {
        // right slope on average, poor r^2
        let gaps = log_gaps(1e-3, 1.0, 8);
        let s: Vec<_> =
            gaps.iter().enumerate().map(|(i, &g)| (g, g.powf(-0.5) * if i % 2 == 0 { 5.0 } else { 0.2 })).collect();
        let r = rate_fit(&s, -0.5, 0.5).unwrap();
        assert!(r.r_squared < MIN_R_SQUARED && !r.pass);
    }

    #[test]
    fn beta_recursion_first_term() {
        let r = lemma32_demo(-0.5, -0.5, 1.0, 1.0, 8, 16).unwrap();
        assert!((r.term_bounds[1] - std::f64::consts::PI).abs() < 1e-12);
        assert!(r.max_rel_diff < 1e-8, "{}", r.max_rel_diff);
        assert!(r.super_geometric && !r.uniform_flag);
        // closed Gamma-quotient form
        use statrs::function::gamma::gamma;
        for (n, &t) in r.term_bounds.iter().enumerate() {
            let g = gamma(0.5).powi(n as i32) * gamma(0.5) / gamma(0.5 + 0.5 * n as f64);
            assert!((t - g).abs() < 1e-10 * g);
        }
    }

    #[test]
    fn exponential_series() {
        let r = lemma32_demo(0.0, 0.0, 1.0, 0.7, 30, 16).unwrap();
        assert!((r.series_bound - 0.7f64.exp()).abs() < 1e-10);
        let mut fact = 1.0;
        for (n, &t) in r.term_bounds.iter().enumerate().take(7) {
            if n > 0 {
                fact *= n as f64;
            }
            assert!((t - 0.7f64.powi(n as i32) / fact).abs() < 1e-14);
        }
        assert!(r.uniform_flag && r.max_rel_diff < 1e-8, "{}", r.max_rel_diff);
        assert!(lemma32_demo(-1.0, 0.0, 1.0, 1.0, 3, 4).is_err());
    }

    #[test]
    fn offset_power_fit_recovers_parameters() {
        let pairs: Vec<_> = log_gaps(1e-3, 1.0, 12).iter().map(|&g| (g, 0.3 + 2.0 * g.powf(-0.5))).collect();
        let (gamma, a, b, misfit) = fit_offset_power(&pairs);
        assert!((gamma + 0.5).abs() < 1e-4 && (a - 0.3).abs() < 1e-3 && (b - 2.0).abs() < 1e-3 && misfit < 1e-4);
    }

    #[test]
    fn mc_is_reproducible_and_centered() {
        let cache = PropagatorCache::new(CoefficientSet::heat(1.0, 1).unwrap(), 1e-10, 8).unwrap();
        let a = mc_covariance_check(&cache, &[0.3], 1.0, 0.0, 10_000, 20, 7).unwrap();
        let b = mc_covariance_check(&cache, &[0.3], 1.0, 0.0, 10_000, 20, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.z_mean_sigmas <= 5.0 && a.cov_err <= a.tolerance && a.mean_err < 1e-12);
    }
}
