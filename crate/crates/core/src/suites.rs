//! Verification suites run by `ou-evolve verify`: each check carries its
//! measured value, tolerance and verdict.

use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::config::{DataSpec, RunConfig};
use crate::error::{Error, Result};
use crate::exterior::Exterior;
use crate::grid::{gradient, lp_norm, lp_norm_vec, on_box_edge, GridFunction};
use crate::propagator::PropagatorCache;
use crate::verify::{
    ck_defect, closed_form_propagator, f_singularity_fit, lemma32_demo, mc_covariance_check, rate_fit,
    verify_sobolev_stability, DataFamily, RateReport, Setup, System,
};
use crate::wholespace::pde_residual_wholespace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Law,
    Residuals,
    Rates,
    Lemma32,
    Montecarlo,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "law" => Ok(Suite::Law),
            "residuals" => Ok(Suite::Residuals),
            "rates" => Ok(Suite::Rates),
            "lemma32" => Ok(Suite::Lemma32),
            "montecarlo" => Ok(Suite::Montecarlo),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!(
                "unknown suite '{s}', expected law, residuals, rates, lemma32, montecarlo or all"
            ))),
        }
    }
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `measured <= tolerance`
    AtMost,
    /// `measured >= tolerance`
    AtLeast,
    /// `|measured - target| <= tolerance`
    Within,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub details: serde_json::Value,
    /// `(gap, value)` rows, written as CSV next to the report.
    #[serde(skip)]
    pub table: Option<Vec<(f64, f64)>>,
}

impl Check {
    fn at_most(name: &str, measured: f64, tolerance: f64, details: serde_json::Value) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: Relation::AtMost,
            target: None,
            tolerance,
            pass: measured <= tolerance,
            details,
            table: None,
        }
    }

    fn at_least(name: &str, measured: f64, tolerance: f64, details: serde_json::Value) -> Self {
        Check {
            relation: Relation::AtLeast,
            pass: measured >= tolerance,
            ..Check::at_most(name, measured, tolerance, details)
        }
    }

    fn rate(name: &str, r: RateReport) -> Self {
        Check {
            name: name.into(),
            measured: r.fitted_slope,
            relation: Relation::Within,
            target: Some(r.target_slope),
            tolerance: r.tolerance,
            pass: r.pass,
            details: json!({ "r_squared": r.r_squared, "fitted_log_c": r.fitted_log_c, "pairs": r.pairs }),
            table: Some(r.pairs),
        }
    }

    /// Extra conditions recorded in `details` that the verdict also needs.
    fn and(mut self, ok: bool) -> Self {
        self.pass &= ok;
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub experiment: String,
    pub system: System,
    pub suite: Suite,
    pub pass: bool,
    pub checks: Vec<Check>,
}

/// Relative `L^2` error that halving must divide by at least this factor.
pub const CK_REFINEMENT_FACTOR: f64 = 2.0;
/// Second-order consistency: halving `h` and `delta` divides a residual by `4 (1 +- 0.3)`.
pub const RESIDUAL_RATIO: (f64, f64) = (2.8, 5.2);
pub const RESIDUAL_TOL: f64 = 5e-3;

pub fn run(cfg: &RunConfig, system: System, suite: Suite) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if suite.includes(Suite::Law) {
        checks.extend(law(cfg, system)?);
    }
    if suite.includes(Suite::Residuals) {
        checks.extend(residuals(cfg, system)?);
    }
    if suite.includes(Suite::Rates) {
        checks.extend(rates(cfg, system)?);
    }
    if suite.includes(Suite::Lemma32) {
        checks.extend(lemma32(cfg)?);
    }
    if suite.includes(Suite::Montecarlo) {
        checks.push(montecarlo(cfg)?);
    }
    Ok(VerifyReport { experiment: cfg.experiment.clone(), system, suite, pass: checks.iter().all(|c| c.pass), checks })
}

/// Builds the evaluation setup for `system` from the configuration.
pub fn setup(cfg: &RunConfig, system: System) -> Result<Setup> {
    let mut s = Setup::new(system, cfg.coefficients()?, cfg.build_grid()?);
    s.domain = cfg.domain;
    s.bounded_radius = cfg.verify.bounded_radius;
    s.ode_tol = cfg.scheme.ode_tol;
    s.quad_nodes = cfg.scheme.quad_nodes;
    s.apply = cfg.scheme.apply_options();
    s.exterior = cfg.scheme.exterior_options(cfg.verify.p);
    s.dt = cfg.scheme.dt;
    s.theta = cfg.scheme.theta;
    Ok(s)
}

/// The same experiment with `h`, `dt` and the residual step halved.
pub fn refined(cfg: &RunConfig) -> Result<RunConfig> {
    if matches!(cfg.data, DataSpec::File { .. }) {
        return Err(Error::Config("data: refinement checks need analytic initial data, not a file".into()));
    }
    let mut c = cfg.clone();
    c.grid.h *= 0.5;
    c.scheme.dt *= 0.5;
    c.verify.residual_delta *= 0.5;
    Ok(c)
}

fn need_gap(cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    let (s, t) = (cfg.times.s, cfg.times.t);
    if !(t > s) {
        return Err(Error::Config(format!("times: this check needs t > s, got t = {t}, s = {s}")));
    }
    Ok((t, cfg.times.r.unwrap_or(0.5 * (s + t)), s))
}

fn cache(cfg: &RunConfig) -> Result<PropagatorCache> {
    PropagatorCache::new(cfg.coefficients()?, cfg.scheme.ode_tol, cfg.scheme.quad_nodes)
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        a.abs() / b.abs()
    }
}

fn law(cfg: &RunConfig, system: System) -> Result<Vec<Check>> {
    let (t, r, s) = need_gap(cfg)?;
    let mut out = Vec::new();
    let cache = cache(cfg)?;

    let pairs = [(t, s), (r, s), (t, r)];
    if let Some(forms) = pairs
        .iter()
        .map(|&(a, b)| closed_form_propagator(&cfg.family, a, b).map(|c| (a, b, c)))
        .collect::<Option<Vec<_>>>()
    {
        let (mut eu, mut eg, mut eq) = (0.0f64, 0.0f64, 0.0f64);
        for (a, b, cf) in forms.iter().filter(|f| f.0 > f.1) {
            eu = eu.max(rel((cache.flow_u(*a, *b)? - &cf.u).norm(), cf.u.norm()));
            if let Some(g) = &cf.g {
                eg = eg.max((cache.drift_g(*a, *b)? - g).norm() / g.norm().max(1.0));
            }
            if let Some(q) = &cf.q {
                eq = eq.max(rel((&cache.covariance_q(*a, *b)?.q_ts - q).norm(), q.norm()));
            }
        }
        let worst = eu.max(eg).max(eq);
        out.push(Check::at_most(
            "propagator_closed_form",
            worst,
            1e-8,
            json!({ "u_rel_err": eu, "g_rel_err": eg, "q_rel_err": eq }),
        ));
    }

    let constants = cache.estimate_constants((t - s).max(1.0), 20)?;
    let exact = match &cfg.family {
        crate::coefficients::FamilySpec::Heat { sigma, dim, .. } => Some((1.0 / sigma, sigma.powi(*dim as i32))),
        crate::coefficients::FamilySpec::Rotation { sigma, .. } => Some((1.0 / sigma, sigma * sigma)),
        _ => None,
    };
    let details = json!({ "c_inv_sqrt": constants.c_inv_sqrt, "c_det": constants.c_det, "exact": exact });
    out.push(match exact {
        Some((ci, cd)) => {
            let err = (constants.c_inv_sqrt / ci - 1.0).abs().max((constants.c_det / cd - 1.0).abs());
            Check::at_most("covariance_constants", err, 1e-6, details)
        }
        None => {
            let finite = constants.c_inv_sqrt.is_finite() && constants.c_det > 0.0;
            Check::at_most("covariance_constants", constants.c_inv_sqrt, f64::MAX, details).and(finite)
        }
    });

    let setup = setup(cfg, system)?;
    let f = cfg.initial_data(&setup.grid)?;
    if system == System::Wholespace {
        if let DataSpec::Gaussian { center, width } = &cfg.data {
            out.push(gaussian_exactness(&setup, &cache, center, *width, t, s, &f)?);
        }
    }
    let tol = if system == System::Exterior { 1e-2 } else { 1e-4 };
    let defect = ck_defect(&setup, t, r, s, &f)?;
    out.push(Check::at_most("chapman_kolmogorov", defect, tol, json!({ "t": t, "r": r, "s": s })));
    if system == System::Exterior {
        let fine_cfg = refined(cfg)?;
        let fine = self::setup(&fine_cfg, system)?;
        let fine_defect = ck_defect(&fine, t, r, s, &fine_cfg.initial_data(&fine.grid)?)?;
        let ratio = defect / fine_defect;
        out.push(Check::at_least(
            "chapman_kolmogorov_refinement",
            ratio,
            CK_REFINEMENT_FACTOR,
            json!({ "defect": defect, "refined_defect": fine_defect, "h": cfg.grid.h, "dt": cfg.scheme.dt }),
        ));
        out.push(picard_check(&setup, t, s, &f)?);
    }
    Ok(out)
}

/// Gaussian data `N(m, w^2 I)` evolve to the density of `N(m, w^2 I + Q_{t,s})`
/// at `U(s,t) x + g(t,s)`.
fn gaussian_exactness(
    setup: &Setup,
    cache: &PropagatorCache,
    center: &[f64],
    width: f64,
    t: f64,
    s: f64,
    f: &GridFunction,
) -> Result<Check> {
    let ws = setup.wholespace()?;
    let u = ws.apply(t, s, f, &setup.grid)?;
    let kp = cache.covariance_q(t, s)?;
    let d = setup.grid.dim();
    let cov = &kp.q_ts + nalgebra::DMatrix::identity(d, d) * (width * width);
    let inv = cov.clone().try_inverse().ok_or(Error::DegenerateCovariance { min_eigenvalue: 0.0 })?;
    let norm = ((2.0 * std::f64::consts::PI).powi(d as i32) * cov.determinant()).sqrt();
    let exact = GridFunction::from_fn(&setup.grid, |x| {
        let y = nalgebra::DVector::from_fn(d, |i, _| {
            (0..d).map(|j| kp.u_st[(i, j)] * x[j]).sum::<f64>() + kp.g_ts[i] - center[i]
        });
        (-0.5 * y.dot(&(&inv * &y))).exp() / norm
    });
    let err = lp_norm(&u.sub(&exact), 2.0) / lp_norm(&exact, 2.0);
    Ok(Check::at_most("gaussian_exactness", err, 1e-4, json!({ "t": t, "s": s })))
}

fn picard_check(setup: &Setup, t: f64, s: f64, f: &GridFunction) -> Result<Check> {
    let ex = setup.exterior_problem(t - s)?;
    let f = ex.restrict(f);
    let (sum, _, diag) = ex.picard_series(t, s, &f)?;
    let rhs = ex.integral_equation_rhs(t, s, &f)?;
    let ie = lp_norm(&rhs.sub(&sum), ex.options().p);
    let ratios = diag.ratios();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let enveloped = diag.term_norms.iter().zip(&diag.factorial_bound).all(|(n, b)| *n <= b * (1.0 + 1e-12));
    let tol = diag.est_series_error + 1e-6;
    Ok(Check::at_most(
        "picard_series",
        ie,
        tol,
        json!({
            "ratios": ratios,
            "ratios_decreasing": decreasing,
            "under_factorial_envelope": enveloped,
            "diagnostics": diag.to_report_json(),
        }),
    )
    .and(decreasing && enveloped && diag.converged))
}

fn residuals(cfg: &RunConfig, system: System) -> Result<Vec<Check>> {
    let fine = refined(cfg)?;
    let mut out = Vec::new();
    match system {
        System::Exterior => {
            let (a, b) = (exterior_residuals(cfg, true)?, exterior_residuals(&fine, false)?);
            out.push(residual_check("t_derivative_residual", a.0, b.0));
            out.push(residual_check("s_derivative_residual", a.1, b.1));
            out.extend(a.2);
        }
        _ => {
            let (a, b) = (wholespace_residual(cfg)?, wholespace_residual(&fine)?);
            out.push(residual_check("pde_residual_wholespace", a, b));
        }
    }
    Ok(out)
}

fn residual_check(name: &str, coarse: f64, fine: f64) -> Check {
    let ratio = coarse / fine;
    Check::at_most(name, coarse, RESIDUAL_TOL, json!({ "refined": fine, "ratio": ratio, "ratio_band": RESIDUAL_RATIO }))
        .and(ratio >= RESIDUAL_RATIO.0 && ratio <= RESIDUAL_RATIO.1)
}

fn wholespace_residual(cfg: &RunConfig) -> Result<f64> {
    let (t, _, s) = need_gap(cfg)?;
    let setup = setup(cfg, System::Wholespace)?;
    let f = cfg.initial_data(&setup.grid)?;
    let radius = cfg.verify.probe_radius;
    let probes: Vec<usize> =
        (0..setup.grid.len()).filter(|&k| setup.grid.radius(k) <= radius && !on_box_edge(&setup.grid, k)).collect();
    pde_residual_wholespace(&setup.wholespace()?, t, s, &f, &probes, cfg.verify.residual_delta)
}

/// `(t residual, s residual, [boundary check, negative control])`; the
/// boundary checks are skipped on the refined grid.
fn exterior_residuals(cfg: &RunConfig, boundary: bool) -> Result<(f64, f64, Vec<Check>)> {
    let (t, _, s) = need_gap(cfg)?;
    let delta = cfg.verify.residual_delta;
    if s < delta {
        return Err(Error::Config(format!(
            "times.s: the s-derivative residual needs s >= verify.residual_delta = {delta}"
        )));
    }
    let setup = setup(cfg, System::Exterior)?;
    let ex = setup.exterior_problem(t - s)?;
    let f = ex.restrict(&cfg.initial_data(&setup.grid)?);
    let margin = ((cfg.verify.probe_margin / setup.grid.h_max()).ceil() as usize).max(2);
    let probes = ex.probes(margin, cfg.verify.probe_radius);
    let rt = ex.t_derivative_residual(t, s, &f, delta, &probes)?;
    let rs = ex.s_derivative_residual(t, s, &f, delta, &probes)?;
    let checks = if boundary {
        let (trace, control) = boundary_checks(&setup, &ex, t, s, &f)?;
        vec![trace, control]
    } else {
        Vec::new()
    };
    Ok((rt, rs, checks))
}

fn boundary_checks(setup: &Setup, ex: &Exterior, t: f64, s: f64, f: &GridFunction) -> Result<(Check, Check)> {
    let u = ex.picard_apply(t, s, f)?.0;
    let h = setup.grid.h_max();
    let grad = gradient(&u).iter().map(|g| g.max_abs()).fold(0.0, f64::max);
    let bound = 5.0 * h * grad;
    let trace = ex.boundary_trace(&u);
    let ws = setup.wholespace()?.apply(t, s, f, &setup.grid)?;
    let control = ex.boundary_trace(&ws);
    let details = json!({ "trace": trace, "bound": bound, "grad_max": grad, "h": h });
    Ok((
        Check::at_most("dirichlet_trace", trace, bound, details.clone()),
        Check::at_least(
            "dirichlet_negative_control",
            control / bound,
            10.0,
            json!({ "wholespace_trace": control, "bound": bound }),
        ),
    ))
}

fn rates(cfg: &RunConfig, system: System) -> Result<Vec<Check>> {
    let setup = setup(cfg, system)?;
    let gaps = cfg.times.gaps.values();
    let s = cfg.times.s;
    let (p, q) = (cfg.verify.p, cfg.verify.q);
    let data =
        DataFamily::ScaleMatched { center: cfg.verify.probe_center(cfg.dim()), min_cells: cfg.verify.probe_min_cells };
    let (smooth_tol, grad_tol) = match system {
        System::Wholespace => (0.05, 0.1),
        System::Bounded => (0.1, 0.1),
        System::Exterior => (0.1, 0.15),
    };
    // One evolution per gap feeds both fits.
    let samples = crate::verify::map_gaps(&gaps, |gap| {
        let f = setup.restrict(&data.sample(&setup.grid, gap));
        let u = setup.evolve(s + gap, s, &f)?;
        let nf = lp_norm(&f, p);
        Ok((gap, lp_norm(&u, q) / nf, lp_norm_vec(&gradient(&u), p) / nf))
    })?;
    let d = setup.grid.dim() as f64;
    let smoothing =
        rate_fit(&samples.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), -0.5 * d * (1.0 / p - 1.0 / q), smooth_tol)?;
    let grad = rate_fit(&samples.iter().map(|x| (x.0, x.2)).collect::<Vec<_>>(), -0.5, grad_tol)?;
    let mut out = vec![Check::rate("smoothing_rate", smoothing), Check::rate("gradient_rate", grad)];

    let f = cfg.initial_data(&setup.grid)?;
    if system == System::Exterior {
        let r = f_singularity_fit(&setup, &f, s, &gaps, 0.15)?;
        out.push(Check {
            name: "correction_singularity".into(),
            measured: r.fitted_exponent,
            relation: Relation::Within,
            target: Some(r.target_exponent),
            tolerance: r.tolerance,
            pass: r.pass,
            details: json!({
                "bound_c": r.bound_c,
                "fitted_a": r.fitted_a,
                "fitted_b": r.fitted_b,
                "max_rel_misfit": r.max_rel_misfit,
                "pairs": r.pairs,
            }),
            table: Some(r.pairs),
        });
    } else {
        let r = verify_sobolev_stability(&setup, 1, p, &f, s, &gaps)?;
        let heat = matches!(cfg.family, crate::coefficients::FamilySpec::Heat { .. }) && system == System::Wholespace;
        let tol = if heat { 1.05 } else { f64::MAX };
        let finite = r.sup_stability.is_finite() && r.sup_smoothing.is_finite();
        let mut c = Check::at_most(
            "sobolev_stability",
            r.sup_stability,
            tol,
            json!({ "sup_smoothing": r.sup_smoothing, "rows": r.rows }),
        )
        .and(finite);
        c.table = Some(r.rows.iter().map(|row| (row.gap, row.stability)).collect());
        out.push(c);
    }
    Ok(out)
}

fn lemma32(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    let r = lemma32_demo(v.lemma_alpha, v.lemma_beta, v.lemma_c0, v.lemma_gap, v.lemma_terms, v.lemma_nodes)?;
    let summable = r.series_bound.is_finite();
    let decay = r.super_geometric || v.lemma_terms <= 5;
    let demo =
        Check::at_most("lemma32_recursion", r.max_rel_diff, 1e-8, serde_json::to_value(&r)?).and(summable && decay);
    let e = lemma32_demo(0.0, 0.0, 1.0, v.lemma_gap, 30, v.lemma_nodes)?;
    let exact = v.lemma_gap.exp();
    let exp = Check::at_most(
        "lemma32_exponential",
        (e.series_bound - exact).abs() / exact,
        1e-10,
        json!({ "series": e.series_bound, "exact": exact, "max_rel_diff": e.max_rel_diff }),
    );
    Ok(vec![demo, exp])
}

fn montecarlo(cfg: &RunConfig) -> Result<Check> {
    let (t, _, s) = need_gap(cfg)?;
    let v = &cfg.verify;
    let r = mc_covariance_check(&cache(cfg)?, &v.mc_start(cfg.dim()), t, s, v.mc_paths, v.mc_steps, cfg.seed)?;
    Ok(Check::at_most("mc_covariance", r.cov_err, r.tolerance, serde_json::to_value(&r)?).and(r.pass))
}
