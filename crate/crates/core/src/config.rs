//! Run configuration: JSON in, validated field by field before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{builtin_family, CoefficientSet, FamilySpec};
use crate::error::{Error, Result};
use crate::exterior::{CorrectionGradient, ExteriorOptions, TimeMap};
use crate::grid::{gaussian_bump, sharp_bump, smoothed_indicator, DomainKind, DomainSpec, Grid, GridFunction};
use crate::verify::log_gaps;
use crate::wholespace::ApplyOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_experiment")]
    pub experiment: String,
    pub family: FamilySpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub times: TimeSpec,
    #[serde(default)]
    pub scheme: SchemeSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_experiment() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub h: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { lo: -20.0, hi: 20.0, h: 1.0 / 32.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSpec {
    pub s: f64,
    pub t: f64,
    /// Intermediate time for composition checks; defaults to the midpoint.
    pub r: Option<f64>,
    pub gaps: GapSpec,
}

impl Default for TimeSpec {
    fn default() -> Self {
        TimeSpec { s: 0.0, t: 1.0, r: None, gaps: GapSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GapSpec {
    List(Vec<f64>),
    LogSpaced { lo: f64, hi: f64, n: usize },
}

impl Default for GapSpec {
    fn default() -> Self {
        GapSpec::LogSpaced { lo: 1e-3, hi: 1.0, n: 10 }
    }
}

impl GapSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GapSpec::List(v) => v.clone(),
            GapSpec::LogSpaced { lo, hi, n } => log_gaps(*lo, *hi, *n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSpec {
    pub theta: f64,
    pub dt: f64,
    pub ode_tol: f64,
    /// Gauss–Legendre nodes per panel for `g` and `Q_{t,s}`.
    pub quad_nodes: usize,
    pub k_max: usize,
    /// Gauss–Legendre nodes per Picard time integral.
    pub picard_nodes: usize,
    pub series_tol: f64,
    pub time_map: TimeMap,
    pub correction_gradient: CorrectionGradient,
    pub kernel_cut: f64,
    pub interp_order: usize,
    pub max_refine: usize,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        let e = ExteriorOptions::default();
        let a = ApplyOptions::default();
        SchemeSpec {
            theta: e.theta,
            dt: e.dt,
            ode_tol: 1e-10,
            quad_nodes: 8,
            k_max: e.k_max,
            picard_nodes: e.nodes,
            series_tol: e.series_tol,
            time_map: e.time_map,
            correction_gradient: e.correction_gradient,
            kernel_cut: a.kernel_cut,
            interp_order: a.interp_order,
            max_refine: a.max_refine,
        }
    }
}

impl SchemeSpec {
    pub fn apply_options(&self) -> ApplyOptions {
        ApplyOptions { kernel_cut: self.kernel_cut, interp_order: self.interp_order, max_refine: self.max_refine }
    }

    pub fn exterior_options(&self, p: f64) -> ExteriorOptions {
        ExteriorOptions {
            theta: self.theta,
            dt: self.dt,
            nodes: self.picard_nodes,
            k_max: self.k_max,
            series_tol: self.series_tol,
            p,
            time_map: self.time_map,
            correction_gradient: self.correction_gradient,
            wholespace: self.apply_options(),
        }
    }
}

/// Initial datum for `evolve`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Zero,
    Gaussian {
        center: Vec<f64>,
        width: f64,
    },
    /// Gaussian of width `4h`.
    Sharp {
        center: Vec<f64>,
    },
    Indicator {
        lo: Vec<f64>,
        hi: Vec<f64>,
        ramp: f64,
    },
    /// Grid CSV as written by `evolve` (`x,value` or `x,y,value`).
    File {
        path: PathBuf,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Gaussian { center: vec![0.0], width: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub p: f64,
    pub q: f64,
    /// Radius of the ball used as the bounded domain.
    pub bounded_radius: f64,
    /// Center of the scale-matched rate probes; empty means the origin.
    pub probe_center: Vec<f64>,
    /// Smallest probe width, in cells.
    pub probe_min_cells: f64,
    pub mc_paths: usize,
    pub mc_steps: usize,
    /// Start point of the Monte Carlo mean check; empty means `0.5 e_1`.
    pub mc_start: Vec<f64>,
    pub lemma_alpha: f64,
    pub lemma_beta: f64,
    pub lemma_c0: f64,
    pub lemma_gap: f64,
    pub lemma_terms: usize,
    pub lemma_nodes: usize,
    /// Time step of the centered differences in the residual checks.
    pub residual_delta: f64,
    /// Residual probes lie within this distance of the origin.
    pub probe_radius: f64,
    /// Exterior residual probes keep this distance, and at least two cells,
    /// from the obstacle and the annulus.
    pub probe_margin: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec {
            p: 2.0,
            q: 4.0,
            bounded_radius: 5.0,
            probe_center: Vec::new(),
            probe_min_cells: 4.0,
            mc_paths: 100_000,
            mc_steps: 200,
            mc_start: Vec::new(),
            lemma_alpha: -0.5,
            lemma_beta: -0.5,
            lemma_c0: 1.0,
            lemma_gap: 1.0,
            lemma_terms: 12,
            lemma_nodes: 16,
            residual_delta: 1e-3,
            probe_radius: 8.0,
            probe_margin: 0.5,
        }
    }
}

impl VerifySpec {
    pub fn probe_center(&self, d: usize) -> Vec<f64> {
        if self.probe_center.is_empty() {
            vec![0.0; d]
        } else {
            self.probe_center.clone()
        }
    }

    pub fn mc_start(&self, d: usize) -> Vec<f64> {
        if self.mc_start.is_empty() {
            let mut x = vec![0.0; d];
            x[0] = 0.5;
            x
        } else {
            self.mc_start.clone()
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            FamilySpec::Heat { dim, .. } | FamilySpec::ScalarCommuting { dim, .. } => *dim,
            FamilySpec::Rotation { .. } => 2,
            FamilySpec::Custom(c) => c.dim,
        }
    }

    /// Field-level checks; the first violation is reported.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let d = self.dim();
        if !(d == 1 || d == 2) {
            return fail("family.dim", format!("dimension must be 1 or 2, got {d}"));
        }
        let g = &self.grid;
        if !(g.lo.is_finite() && g.hi.is_finite() && g.lo < g.hi) {
            return fail("grid", format!("need finite lo < hi, got [{}, {}]", g.lo, g.hi));
        }
        if !(g.h > 0.0 && (g.hi - g.lo) / g.h >= 7.0) {
            return fail("grid.h", format!("spacing must be positive with at least 8 points, got {}", g.h));
        }
        let t = &self.times;
        if !(t.s >= 0.0 && t.s.is_finite()) {
            return fail("times.s", format!("must be a finite time >= 0, got {}", t.s));
        }
        if !(t.t >= t.s && t.t.is_finite()) {
            return fail("times.t", format!("must satisfy t >= s, got t = {}, s = {}", t.t, t.s));
        }
        if let Some(r) = t.r {
            if !(r >= t.s && r <= t.t) {
                return fail("times.r", format!("must lie in [s, t], got {r}"));
            }
        }
        let gaps = t.gaps.values();
        if gaps.is_empty() || gaps.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return fail("times.gaps", "gaps must be positive and finite".into());
        }
        let sc = &self.scheme;
        if !(0.5..=1.0).contains(&sc.theta) {
            return fail("scheme.theta", format!("must lie in [0.5, 1], got {}", sc.theta));
        }
        if !(sc.dt > 0.0) {
            return fail("scheme.dt", format!("must be positive, got {}", sc.dt));
        }
        if !(sc.ode_tol > 0.0 && sc.ode_tol < 1e-2) {
            return fail("scheme.ode_tol", format!("must lie in (0, 1e-2), got {}", sc.ode_tol));
        }
        if sc.quad_nodes < 2 {
            return fail("scheme.quad_nodes", format!("need at least 2 nodes, got {}", sc.quad_nodes));
        }
        if !(1..=4).contains(&sc.k_max) {
            return fail("scheme.k_max", format!("must lie in [1, 4], got {}", sc.k_max));
        }
        if sc.picard_nodes < 4 {
            return fail("scheme.picard_nodes", format!("need at least 4 nodes, got {}", sc.picard_nodes));
        }
        if !(sc.series_tol > 0.0) {
            return fail("scheme.series_tol", format!("must be positive, got {}", sc.series_tol));
        }
        if !(sc.kernel_cut >= 4.0) {
            return fail("scheme.kernel_cut", format!("must be at least 4 standard deviations, got {}", sc.kernel_cut));
        }
        if !(sc.interp_order == 1 || sc.interp_order == 3) {
            return fail("scheme.interp_order", format!("must be 1 or 3, got {}", sc.interp_order));
        }
        if sc.max_refine == 0 {
            return fail("scheme.max_refine", "must be at least 1".into());
        }
        let dm = &self.domain;
        let kind_dim = match dm.kind {
            DomainKind::WholeSpace => d,
            DomainKind::IntervalComplement => 1,
            DomainKind::DiscComplement => 2,
        };
        if kind_dim != d {
            return fail("domain.kind", format!("{:?} needs dimension {kind_dim}, family has {d}", dm.kind));
        }
        if dm.kind != DomainKind::WholeSpace && !(dm.obstacle_radius > 0.0 && dm.obstacle_radius < dm.big_r) {
            return fail(
                "domain",
                format!("need 0 < obstacle_radius < big_r, got {} and {}", dm.obstacle_radius, dm.big_r),
            );
        }
        match &self.data {
            DataSpec::Gaussian { center, width } => {
                if center.len() != d {
                    return fail("data.center", format!("needs {d} coordinates"));
                }
                if !(*width > 0.0) {
                    return fail("data.width", format!("must be positive, got {width}"));
                }
            }
            DataSpec::Sharp { center } if center.len() != d => {
                return fail("data.center", format!("needs {d} coordinates"))
            }
            DataSpec::Indicator { lo, hi, ramp } => {
                if lo.len() != d || hi.len() != d {
                    return fail("data", format!("lo and hi need {d} coordinates"));
                }
                if !(*ramp > 0.0) {
                    return fail("data.ramp", format!("must be positive, got {ramp}"));
                }
            }
            _ => {}
        }
        let v = &self.verify;
        if !(v.p > 1.0 && v.q >= v.p && v.q.is_finite()) {
            return fail("verify", format!("need 1 < p <= q < inf, got p = {}, q = {}", v.p, v.q));
        }
        if !v.probe_center.is_empty() && v.probe_center.len() != d {
            return fail("verify.probe_center", format!("needs {d} coordinates"));
        }
        if !v.mc_start.is_empty() && v.mc_start.len() != d {
            return fail("verify.mc_start", format!("needs {d} coordinates"));
        }
        if v.mc_paths < 10_000 {
            return fail("verify.mc_paths", format!("need at least 10000 paths, got {}", v.mc_paths));
        }
        if v.mc_steps == 0 {
            return fail("verify.mc_steps", "must be positive".into());
        }
        if !(v.lemma_alpha > -1.0 && v.lemma_beta > -1.0) {
            return fail(
                "verify.lemma_alpha",
                format!("alpha and beta must exceed -1, got {} and {}", v.lemma_alpha, v.lemma_beta),
            );
        }
        if !(v.lemma_c0 > 0.0 && v.lemma_gap > 0.0) || v.lemma_terms == 0 || v.lemma_nodes < 2 {
            return fail("verify.lemma_c0", "need c0 > 0, gap > 0, terms >= 1, nodes >= 2".into());
        }
        if !(v.probe_margin >= 0.0) {
            return fail("verify.probe_margin", format!("must be non-negative, got {}", v.probe_margin));
        }
        if !(v.probe_radius > 0.0) {
            return fail("verify.probe_radius", format!("must be positive, got {}", v.probe_radius));
        }
        if !(v.residual_delta > 0.0) {
            return fail("verify.residual_delta", format!("must be positive, got {}", v.residual_delta));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<CoefficientSet> {
        builtin_family(&self.family, self.times.t.max(1.0))
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::with_spacing(self.grid.lo, self.grid.hi, self.grid.h, self.dim())
    }

    pub fn initial_data(&self, grid: &Grid) -> Result<GridFunction> {
        let f = match &self.data {
            DataSpec::Zero => GridFunction::zeros(grid),
            DataSpec::Gaussian { center, width } => gaussian_bump(grid, center, *width),
            DataSpec::Sharp { center } => sharp_bump(grid, center),
            DataSpec::Indicator { lo, hi, ramp } => smoothed_indicator(grid, lo, hi, *ramp),
            DataSpec::File { path } => {
                let f = GridFunction::read_csv(path)?;
                if f.grid != *grid {
                    return Err(Error::Data(format!("{} is not on the configured grid", path.display())));
                }
                f
            }
        };
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_json(r#"{"family": {"family": "heat", "sigma": 1.0, "dim": 1}}"#).unwrap();
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(c.times.gaps.values().len(), 10);
        assert_eq!(c.build_grid().unwrap().n()[0], 1281);
    }

    #[test]
    fn field_level_messages() {
        let bad = r#"{"family": {"family": "heat", "sigma": 1.0, "dim": 1}, "scheme": {"theta": 0.2}}"#;
        let e = RunConfig::from_json(bad).unwrap_err().to_string();
        assert!(e.contains("scheme.theta"), "{e}");
        let bad = r#"{"family": {"family": "heat", "sigma": 1.0, "dim": 1}, "times": {"s": 1.0, "t": 0.5}}"#;
        assert!(RunConfig::from_json(bad).unwrap_err().to_string().contains("times.t"));
        let bad = r#"{"family": {"family": "heat", "sigma": 1.0, "dim": 1}, "colour": 3}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))));
        let bad = r#"{"family": {"family": "rotation", "omega": 1.0}, "domain": {"kind": "interval_complement", "obstacle_radius": 1.0, "big_r": 2.0}}"#;
        assert!(RunConfig::from_json(bad).unwrap_err().to_string().contains("domain.kind"));
    }

    #[test]
    fn gap_forms() {
        let c = RunConfig::from_json(
            r#"{"family": {"family": "heat", "sigma": 1.0, "dim": 1}, "times": {"gaps": [0.1, 0.2]}}"#,
        )
        .unwrap();
        assert_eq!(c.times.gaps.values(), vec![0.1, 0.2]);
    }
}
