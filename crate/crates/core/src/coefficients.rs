//! Time-dependent coefficient triples `(Q, M, c)` of the operator
//!
//! ```text
//! L(t) u = 1/2 Tr(Q(t) Q(t)^T D^2 u) + <M(t) x + c(t), D u>
//! ```
//!
//! together with a handful of analytic families whose propagators are known
//! in closed form and serve as test oracles.

use std::fmt;
use std::sync::{Arc, Mutex};

use evalexpr::{
    ContextWithMutableFunctions, ContextWithMutableVariables, DefaultNumericTypes, Function, HashMapContext, Node,
    Value,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTag {
    Constant,
    ScalarCommuting,
    Rotation,
    Custom,
}

/// `value + slope * t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub value: f64,
    #[serde(default)]
    pub slope: f64,
}

impl Affine {
    pub fn constant(value: f64) -> Self {
        Affine { value, slope: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.value + self.slope * t
    }

    /// Integral over `[s, t]`.
    pub fn integral(&self, s: f64, t: f64) -> f64 {
        self.value * (t - s) + 0.5 * self.slope * (t * t - s * s)
    }
}

/// Immutable coefficient data. Cloning shares the evaluators.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    q: MatrixFn,
    m: MatrixFn,
    c: VectorFn,
    mu: f64,
    family: FamilyTag,
    autonomous: bool,
    /// Hölder exponent of the data; informational only.
    pub hoelder_alpha: Option<f64>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("mu", &self.mu)
            .field("family", &self.family)
            .field("autonomous", &self.autonomous)
            .finish()
    }
}

impl CoefficientSet {
    pub fn new(dim: usize, q: MatrixFn, m: MatrixFn, c: VectorFn, mu: f64, family: FamilyTag) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!("ellipticity constant mu must be positive, got {mu}")));
        }
        Ok(CoefficientSet { dim, q, m, c, mu, family, autonomous: false, hoelder_alpha: None })
    }

    /// `Q = sigma I`, `M = 0`, `c = 0`.
    pub fn heat(sigma: f64, dim: usize) -> Result<Self> {
        check_sigma(sigma)?;
        let q: MatrixFn = Arc::new(move |_| DMatrix::identity(dim, dim) * sigma);
        let mut set = Self::new(dim, q, zero_matrix(dim), zero_vector(dim), sigma, FamilyTag::Constant)?;
        set.autonomous = true;
        Ok(set)
    }

    /// `M(t) = a(t) A0` with a fixed generator `A0`, `Q = sigma I`.
    pub fn scalar_commuting(rate: Affine, generator: DMatrix<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let dim = generator.nrows();
        if generator.ncols() != dim {
            return Err(Error::Config("scalar_commuting generator must be square".into()));
        }
        let q: MatrixFn = Arc::new(move |_| DMatrix::identity(dim, dim) * sigma);
        let m: MatrixFn = Arc::new(move |t| &generator * rate.eval(t));
        let mut set = Self::new(dim, q, m, zero_vector(dim), sigma, FamilyTag::ScalarCommuting)?;
        set.autonomous = rate.slope == 0.0;
        Ok(set)
    }

    /// Planar rotation drift `M(t) = omega(t) J` with `J = [[0, -1], [1, 0]]`, `Q = sigma I`.
    pub fn rotation(omega: Affine, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let q: MatrixFn = Arc::new(move |_| DMatrix::identity(2, 2) * sigma);
        let m: MatrixFn = Arc::new(move |t| rotation_generator() * omega.eval(t));
        let mut set = Self::new(2, q, m, zero_vector(2), sigma, FamilyTag::Rotation)?;
        set.autonomous = omega.slope == 0.0;
        Ok(set)
    }

    /// Adds the drift `c(t) = c0 + c1 t`.
    pub fn with_drift(mut self, c0: DVector<f64>, c1: DVector<f64>) -> Result<Self> {
        if c0.len() != self.dim || c1.len() != self.dim {
            return Err(Error::Config(format!("drift vectors must have length {}", self.dim)));
        }
        let base = self.c.clone();
        self.autonomous &= c1.iter().all(|&v| v == 0.0);
        self.c = Arc::new(move |t| base(t) + &c0 + &c1 * t);
        Ok(self)
    }

    /// Coefficients given as closed-form expressions in `t`, evaluated at runtime.
    ///
    /// When `mu` is not given it is taken as 99% of the smallest singular value of
    /// `Q(t)` observed on `scan`.
    pub fn custom(spec: &CustomSpec, scan: (f64, f64)) -> Result<Self> {
        let d = spec.dim;
        if spec.q.len() != d || spec.q.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("custom.q must be a {d}x{d} array of expressions")));
        }
        if spec.m.len() != d || spec.m.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("custom.m must be a {d}x{d} array of expressions")));
        }
        if spec.c.len() != d {
            return Err(Error::Config(format!("custom.c must hold {d} expressions")));
        }
        let q = ExprMatrix::parse(&spec.q, "q")?;
        let m = ExprMatrix::parse(&spec.m, "m")?;
        let c = ExprMatrix::parse(std::slice::from_ref(&spec.c), "c")?;
        let qf: MatrixFn = Arc::new(move |t| q.eval(t));
        let mf: MatrixFn = Arc::new(move |t| m.eval(t));
        let cf: VectorFn = Arc::new(move |t| {
            let row = c.eval(t);
            DVector::from_iterator(row.ncols(), row.iter().copied())
        });
        // Provisional mu; replaced below.
        let mut set = Self::new(d, qf, mf, cf, 1.0, FamilyTag::Custom)?;
        let scanned = check_ellipticity(&set, scan.0, scan.1, 201)?;
        set.mu = match spec.mu {
            Some(mu) => {
                if !(mu > 0.0) {
                    return Err(Error::Config(format!("custom.mu must be positive, got {mu}")));
                }
                if mu > scanned.min_singular_value + 1e-12 {
                    return Err(Error::Config(format!(
                        "custom.mu = {mu} exceeds the smallest singular value {} of Q(t) at t = {}",
                        scanned.min_singular_value, scanned.at_t
                    )));
                }
                mu
            }
            None => 0.99 * scanned.min_singular_value,
        };
        if !(set.mu > 0.0) {
            return Err(Error::Config("Q(t) is singular on the working interval".into()));
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn family(&self) -> FamilyTag {
        self.family
    }

    /// True when none of `Q`, `M`, `c` depends on time.
    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    pub fn q(&self, t: f64) -> DMatrix<f64> {
        (self.q)(t)
    }

    pub fn m(&self, t: f64) -> DMatrix<f64> {
        (self.m)(t)
    }

    pub fn c(&self, t: f64) -> DVector<f64> {
        (self.c)(t)
    }

    pub fn try_q(&self, t: f64) -> Result<DMatrix<f64>> {
        finite_matrix(self.q(t), "Q", t)
    }

    pub fn try_m(&self, t: f64) -> Result<DMatrix<f64>> {
        finite_matrix(self.m(t), "M", t)
    }

    pub fn try_c(&self, t: f64) -> Result<DVector<f64>> {
        let c = self.c(t);
        if c.iter().all(|v| v.is_finite()) {
            Ok(c)
        } else {
            Err(Error::Evaluation { what: "c", t })
        }
    }

    /// Diffusion matrix `a = 1/2 Q Q^T`.
    pub fn diffusion(&self, t: f64) -> DMatrix<f64> {
        let q = self.q(t);
        (&q * q.transpose()) * 0.5
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must be positive, got {sigma}")))
    }
}

fn zero_matrix(dim: usize) -> MatrixFn {
    Arc::new(move |_| DMatrix::zeros(dim, dim))
}

fn zero_vector(dim: usize) -> VectorFn {
    Arc::new(move |_| DVector::zeros(dim))
}

fn finite_matrix(m: DMatrix<f64>, what: &'static str, t: f64) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::Evaluation { what, t })
    }
}

pub fn rotation_generator() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSpec {
    pub dim: usize,
    pub q: Vec<Vec<String>>,
    pub m: Vec<Vec<String>>,
    pub c: Vec<String>,
    #[serde(default)]
    pub mu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub c0: Vec<f64>,
    #[serde(default)]
    pub c1: Option<Vec<f64>>,
}

/// Serializable description of a coefficient family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Heat {
        sigma: f64,
        dim: usize,
        #[serde(default)]
        drift: Option<DriftSpec>,
    },
    ScalarCommuting {
        rate: f64,
        #[serde(default)]
        slope: f64,
        /// Defaults to the identity of size `dim`.
        #[serde(default)]
        generator: Option<Vec<Vec<f64>>>,
        #[serde(default = "one")]
        sigma: f64,
        dim: usize,
        #[serde(default)]
        drift: Option<DriftSpec>,
    },
    Rotation {
        omega: f64,
        #[serde(default)]
        omega_slope: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        drift: Option<DriftSpec>,
    },
    Custom(CustomSpec),
}

fn one() -> f64 {
    1.0
}

/// Builds a coefficient set from its description. `horizon` bounds the
/// interval scanned for the ellipticity constant of custom coefficients.
pub fn builtin_family(spec: &FamilySpec, horizon: f64) -> Result<CoefficientSet> {
    let (set, drift) = match spec {
        FamilySpec::Heat { sigma, dim, drift } => (CoefficientSet::heat(*sigma, *dim)?, drift),
        FamilySpec::ScalarCommuting { rate, slope, generator, sigma, dim, drift } => {
            let gen = match generator {
                Some(rows) => matrix_from_rows(rows, *dim, "generator")?,
                None => DMatrix::identity(*dim, *dim),
            };
            let a = Affine { value: *rate, slope: *slope };
            (CoefficientSet::scalar_commuting(a, gen, *sigma)?, drift)
        }
        FamilySpec::Rotation { omega, omega_slope, sigma, drift } => {
            let w = Affine { value: *omega, slope: *omega_slope };
            (CoefficientSet::rotation(w, *sigma)?, drift)
        }
        FamilySpec::Custom(custom) => return CoefficientSet::custom(custom, (0.0, horizon.max(1e-12))),
    };
    match drift {
        Some(d) => {
            let c0 = DVector::from_vec(d.c0.clone());
            let c1 = DVector::from_vec(d.c1.clone().unwrap_or_else(|| vec![0.0; set.dim()]));
            set.with_drift(c0, c1)
        }
        None => Ok(set),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("{name} must be a {dim}x{dim} matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub min_singular_value: f64,
    pub at_t: f64,
    /// Smallest observed value fell below the declared `mu`.
    pub violated: bool,
}

/// Scans `n_samples` equispaced times in `[t0, t1]` for the smallest singular
/// value of `Q(t)`.
pub fn check_ellipticity(coeffs: &CoefficientSet, t0: f64, t1: f64, n_samples: usize) -> Result<EllipticityReport> {
    if !(t0 <= t1) {
        return Err(Error::Domain(format!("empty interval [{t0}, {t1}]")));
    }
    if n_samples < 2 {
        return Err(Error::Domain("need at least two samples".into()));
    }
    let mut best = (f64::INFINITY, t0);
    for k in 0..n_samples {
        let t = t0 + (t1 - t0) * k as f64 / (n_samples - 1) as f64;
        let q = coeffs.try_q(t)?;
        let smin = q.singular_values().min();
        if smin < best.0 {
            best = (smin, t);
        }
    }
    Ok(EllipticityReport { min_singular_value: best.0, at_t: best.1, violated: best.0 < coeffs.mu() - 1e-12 })
}

/// A matrix of parsed expressions in the single variable `t`.
struct ExprMatrix {
    rows: usize,
    cols: usize,
    nodes: Vec<Node>,
    context: Mutex<HashMapContext>,
}

impl ExprMatrix {
    fn parse(src: &[Vec<String>], name: &str) -> Result<Self> {
        let rows = src.len();
        let cols = src.first().map_or(0, |r| r.len());
        let mut nodes = Vec::with_capacity(rows * cols);
        for (i, row) in src.iter().enumerate() {
            for (j, text) in row.iter().enumerate() {
                let node = evalexpr::build_operator_tree(text)
                    .map_err(|e| Error::Config(format!("{name}[{i}][{j}] = {text:?}: {e}")))?;
                nodes.push(node);
            }
        }
        let matrix = ExprMatrix { rows, cols, nodes, context: Mutex::new(math_context()?) };
        // Surface unknown identifiers and type errors at construction time.
        for (k, node) in matrix.nodes.iter().enumerate() {
            let mut ctx = matrix.context.lock().expect("expression context poisoned");
            ctx.set_value("t".into(), Value::Float(0.0)).map_err(|e| Error::Config(e.to_string()))?;
            node.eval_number_with_context(&*ctx).map_err(|e| Error::Config(format!("{name} entry {k}: {e}")))?;
        }
        Ok(matrix)
    }

    fn eval(&self, t: f64) -> DMatrix<f64> {
        let mut ctx = self.context.lock().expect("expression context poisoned");
        ctx.set_value("t".into(), Value::Float(t)).expect("t is a float variable");
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.nodes[i * self.cols + j].eval_number_with_context(&*ctx).unwrap_or(f64::NAN)
        })
    }
}

fn math_context() -> Result<HashMapContext> {
    fn unary(f: fn(f64) -> f64) -> Function<DefaultNumericTypes> {
        Function::new(move |arg| Ok(Value::Float(f(arg.as_number()?))))
    }
    let mut ctx = HashMapContext::new();
    let fns: [(&str, fn(f64) -> f64); 10] = [
        ("sin", f64::sin),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("log", f64::ln),
        ("sqrt", f64::sqrt),
        ("abs", f64::abs),
        ("tanh", f64::tanh),
        ("atan", f64::atan),
    ];
    for (name, f) in fns {
        ctx.set_function(name.into(), unary(f)).map_err(|e| Error::Config(e.to_string()))?;
    }
    ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI)).map_err(|e| Error::Config(e.to_string()))?;
    ctx.set_value("e".into(), Value::Float(std::f64::consts::E)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_ellipticity() {
        let heat = CoefficientSet::heat(1.0, 2).unwrap();
        let r = check_ellipticity(&heat, 0.0, 3.0, 10).unwrap();
        assert!((r.min_singular_value - 1.0).abs() < 1e-14);
        assert!(!r.violated);
    }

    #[test]
    fn diagonal_ellipticity() {
        let q: MatrixFn = Arc::new(|_| DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
        let set = CoefficientSet::new(2, q, zero_matrix(2), zero_vector(2), 2.0, FamilyTag::Custom).unwrap();
        let r = check_ellipticity(&set, 0.0, 1.0, 10).unwrap();
        assert!((r.min_singular_value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oscillating_scalar_ellipticity() {
        let spec = CustomSpec {
            dim: 1,
            q: vec![vec!["1 + 0.5*sin(t)".into()]],
            m: vec![vec!["0".into()]],
            c: vec!["0".into()],
            mu: None,
        };
        let set = CoefficientSet::custom(&spec, (0.0, 2.0 * PI)).unwrap();
        let r = check_ellipticity(&set, 0.0, 2.0 * PI, 100).unwrap();
        // Oracle: scan the closed form on the same sample.
        let expected = (0..100).map(|k| 1.0 + 0.5 * (2.0 * PI * k as f64 / 99.0).sin()).fold(f64::INFINITY, f64::min);
        assert!((r.min_singular_value - expected).abs() < 1e-14);
        assert!((r.at_t - 1.5 * PI).abs() < 2.0 * PI / 99.0);
        assert!((r.min_singular_value - 0.5).abs() < 1e-3);
        assert!((set.mu() - 0.99 * r.min_singular_value).abs() < 1e-3);
    }

    #[test]
    fn non_finite_entry_names_time() {
        let spec = CustomSpec {
            dim: 1,
            q: vec![vec!["1/(t-1)".into()]],
            m: vec![vec!["0".into()]],
            c: vec!["0".into()],
            mu: Some(0.1),
        };
        let q: MatrixFn = Arc::new(|t| DMatrix::from_element(1, 1, 1.0 / (t - 1.0)));
        let set = CoefficientSet::new(1, q, zero_matrix(1), zero_vector(1), 0.1, FamilyTag::Custom).unwrap();
        match check_ellipticity(&set, 0.0, 2.0, 3) {
            Err(Error::Evaluation { what: "Q", t }) => assert_eq!(t, 1.0),
            other => panic!("expected evaluation error, got {other:?}"),
        }
        // The expression route rejects the same data at construction.
        assert!(CoefficientSet::custom(&spec, (0.0, 2.0)).is_err());
    }

    #[test]
    fn builtin_constructors_echo_parameters() {
        let heat = builtin_family(&FamilySpec::Heat { sigma: 1.0, dim: 1, drift: None }, 1.0).unwrap();
        assert_eq!(heat.q(0.3)[(0, 0)], 1.0);
        assert_eq!(heat.m(0.3)[(0, 0)], 0.0);
        assert_eq!(heat.c(0.3)[0], 0.0);
        assert_eq!(heat.mu(), 1.0);

        let rot = builtin_family(&FamilySpec::Rotation { omega: 1.0, omega_slope: 0.0, sigma: 1.0, drift: None }, 1.0)
            .unwrap();
        assert_eq!(rot.m(2.0), rotation_generator());
        assert_eq!(rot.q(2.0), DMatrix::identity(2, 2));
        assert_eq!(rot.mu(), 1.0);

        let sc = builtin_family(
            &FamilySpec::ScalarCommuting { rate: 0.0, slope: 1.0, generator: None, sigma: 1.0, dim: 1, drift: None },
            1.0,
        )
        .unwrap();
        assert_eq!(sc.m(0.7)[(0, 0)], 0.7);
        assert!(!sc.is_autonomous());
    }

    #[test]
    fn rejects_bad_sigma_and_unknown_family() {
        assert!(CoefficientSet::heat(0.0, 1).is_err());
        assert!(CoefficientSet::heat(-1.0, 1).is_err());
        let parsed: std::result::Result<FamilySpec, _> = serde_json::from_str(r#"{"family":"levy","sigma":1}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn drift_is_added() {
        let set = CoefficientSet::heat(1.0, 2)
            .unwrap()
            .with_drift(DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 2.0]))
            .unwrap();
        let c = set.c(0.5);
        assert_eq!(c.as_slice(), &[1.0, 1.0]);
        assert!(!set.is_autonomous());
    }

    #[test]
    fn evaluators_are_deterministic() {
        let spec = CustomSpec {
            dim: 2,
            q: vec![vec!["1+t^2".into(), "0.1*cos(t)".into()], vec!["0".into(), "2".into()]],
            m: vec![vec!["sin(t)".into(), "0".into()], vec!["0".into(), "exp(-t)".into()]],
            c: vec!["t".into(), "pi".into()],
            mu: None,
        };
        let set = CoefficientSet::custom(&spec, (0.0, 1.0)).unwrap();
        for &t in &[0.0, 0.25, 0.9] {
            let a = set.q(t);
            let b = set.q(t);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!((set.c(0.0)[1] - PI).abs() < 1e-15);
    }

    #[test]
    fn builtins_respect_their_mu() {
        let sets = [
            CoefficientSet::heat(0.7, 2).unwrap(),
            CoefficientSet::rotation(Affine { value: 1.0, slope: 0.3 }, 1.3).unwrap(),
            CoefficientSet::scalar_commuting(Affine::constant(1.0), DMatrix::identity(1, 1), 0.5).unwrap(),
        ];
        for set in &sets {
            let r = check_ellipticity(set, 0.0, 2.0, 50).unwrap();
            assert!(r.min_singular_value >= set.mu() - 1e-12);
        }
    }
}
