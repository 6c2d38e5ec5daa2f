//! BDSDE problem instances and the catalog of analytic builtin cases.
//!
//! A problem is the forward SDE `dX = b(X) dt + σ(X) dW`, `X_0 = x0`, coupled to
//! the backward equation
//!
//! ```text
//! Y_t = Φ(X_T) + ∫_t^T f(X_s, Y_s, Z_s) ds + ∫_t^T g(X_s, Y_s) d←B_s − ∫_t^T Z_s dW_s
//! ```
//!
//! All coefficients are scalar. `f` and `g` carry user-declared Lipschitz
//! constants in the squared form `|f(p) − f(q)|² ≤ L_f |p − q|²`, audited by
//! [`validate_problem`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type BackwardDriverFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A fully specified BDSDE instance. Immutable once built.
#[derive(Clone)]
pub struct ProblemSpec {
    pub drift: ScalarFn,
    pub diffusion: ScalarFn,
    pub driver: DriverFn,
    pub backward_driver: BackwardDriverFn,
    pub terminal: ScalarFn,
    pub lipschitz_f: f64,
    pub lipschitz_g: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("lipschitz_f", &self.lipschitz_f)
            .field("lipschitz_g", &self.lipschitz_g)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        drift: ScalarFn,
        diffusion: ScalarFn,
        driver: DriverFn,
        backward_driver: BackwardDriverFn,
        terminal: ScalarFn,
        lipschitz_f: f64,
        lipschitz_g: f64,
        x0: f64,
        horizon: f64,
    ) -> Result<Self> {
        if !(lipschitz_f >= 0.0 && lipschitz_f.is_finite()) {
            return Err(Error::config(format!("lipschitz_f must be >= 0, got {lipschitz_f}")));
        }
        if !(lipschitz_g >= 0.0 && lipschitz_g.is_finite()) {
            return Err(Error::config(format!("lipschitz_g must be >= 0, got {lipschitz_g}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be > 0, got {horizon}")));
        }
        if !x0.is_finite() {
            return Err(Error::config("initial state must be finite"));
        }
        Ok(Self {
            drift,
            diffusion,
            driver,
            backward_driver,
            terminal,
            lipschitz_f,
            lipschitz_g,
            x0,
            horizon,
        })
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        (self.drift)(x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        (self.diffusion)(x)
    }

    #[inline]
    pub fn f(&self, x: f64, y: f64, z: f64) -> f64 {
        (self.driver)(x, y, z)
    }

    #[inline]
    pub fn g(&self, x: f64, y: f64) -> f64 {
        (self.backward_driver)(x, y)
    }

    #[inline]
    pub fn phi(&self, x: f64) -> f64 {
        (self.terminal)(x)
    }
}

/// Tags of the builtin analytic cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    Martingale,
    LinearF,
    ConstantG,
    LinearG,
    QuadraticTerminal,
}

impl CaseTag {
    pub const ALL: [CaseTag; 5] = [
        CaseTag::Martingale,
        CaseTag::LinearF,
        CaseTag::ConstantG,
        CaseTag::LinearG,
        CaseTag::QuadraticTerminal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::Martingale => "martingale",
            CaseTag::LinearF => "linear_f",
            CaseTag::ConstantG => "constant_g",
            CaseTag::LinearG => "linear_g",
            CaseTag::QuadraticTerminal => "quadratic_terminal",
        }
    }
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown builtin case '{s}'")))
    }
}

/// Parameters of a builtin case. `a` is the rate of `linear_f`, `c` the
/// coefficient of the `g` cases; `x0` and `horizon` apply to every case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaseParams {
    pub a: f64,
    pub c: f64,
    pub x0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl Default for CaseParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            c: 0.2,
            x0: 1.0,
            horizon: 1.0,
        }
    }
}

/// A builtin case: tag plus parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinCase {
    pub tag: CaseTag,
    pub params: CaseParams,
}

/// Names the exact solution of the time-discrete scheme for a builtin case.
/// All builtins use `b = 0`, `σ = 1`, so the discrete solutions are explicit
/// functions of the simulated `X` and `ΔB`. Evaluated by
/// [`crate::oracle::closed_form_discrete`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedForm {
    /// `Y_k = X_k`, `Z_k = σ`.
    Martingale { sigma: f64 },
    /// `Y_k = X_k (1 − a h)^{−(N−k)}`, `Z_k = σ (1 − a h)^{−(N−k−1)}`.
    LinearF { a: f64, sigma: f64 },
    /// `Y_k = X_k + c Σ_{j≥k} ΔB_j`, `Z_k = σ`.
    ConstantG { c: f64, sigma: f64 },
    /// `Y_k = X_k Π_{j≥k} (1 + c ΔB_j)`, `Z_k = σ Π_{j≥k} (1 + c ΔB_j)`.
    LinearG { c: f64, sigma: f64 },
    /// `Y_k = X_k² + σ² (N−k) h`, `Z_k = 2 σ X_k`.
    QuadraticTerminal { sigma: f64 },
}

impl BuiltinCase {
    pub fn new(tag: CaseTag, params: CaseParams) -> Self {
        Self { tag, params }
    }

    pub fn closed_form(&self) -> ClosedForm {
        let sigma = 1.0;
        match self.tag {
            CaseTag::Martingale => ClosedForm::Martingale { sigma },
            CaseTag::LinearF => ClosedForm::LinearF {
                a: self.params.a,
                sigma,
            },
            CaseTag::ConstantG => ClosedForm::ConstantG {
                c: self.params.c,
                sigma,
            },
            CaseTag::LinearG => ClosedForm::LinearG {
                c: self.params.c,
                sigma,
            },
            CaseTag::QuadraticTerminal => ClosedForm::QuadraticTerminal { sigma },
        }
    }
}

/// Resolves a builtin case into a problem and the descriptor of its discrete
/// closed form.
pub fn make_builtin_case(tag: CaseTag, params: CaseParams) -> Result<(ProblemSpec, ClosedForm)> {
    for (name, v) in [
        ("a", params.a),
        ("c", params.c),
        ("x0", params.x0),
        ("T", params.horizon),
    ] {
        if !v.is_finite() {
            return Err(Error::config(format!("case parameter {name} must be finite")));
        }
    }
    let zero: ScalarFn = Arc::new(|_| 0.0);
    let one: ScalarFn = Arc::new(|_| 1.0);
    let identity: ScalarFn = Arc::new(|x| x);
    let no_f: DriverFn = Arc::new(|_, _, _| 0.0);
    let no_g: BackwardDriverFn = Arc::new(|_, _| 0.0);

    let CaseParams { a, c, x0, horizon } = params;
    let (driver, backward_driver, terminal, lf, lg): (DriverFn, BackwardDriverFn, ScalarFn, f64, f64) =
        match tag {
            CaseTag::Martingale => (no_f, no_g, identity, 0.0, 0.0),
            CaseTag::LinearF => (Arc::new(move |_, y, _| a * y), no_g, identity, a * a, 0.0),
            CaseTag::ConstantG => (no_f, Arc::new(move |_, _| c), identity, 0.0, 0.0),
            CaseTag::LinearG => (no_f, Arc::new(move |_, y| c * y), identity, 0.0, c * c),
            CaseTag::QuadraticTerminal => (no_f, no_g, Arc::new(|x| x * x), 0.0, 0.0),
        };
    let spec = ProblemSpec::new(zero, one, driver, backward_driver, terminal, lf, lg, x0, horizon)?;
    Ok((spec, BuiltinCase::new(tag, params).closed_form()))
}

/// Result of the sampled Lipschitz audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub worst_ratio_f: f64,
    pub worst_ratio_g: f64,
    pub pass_f: bool,
    pub pass_g: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.pass_f && self.pass_g
    }
}

const AUDIT_LO: f64 = -10.0;
const AUDIT_HI: f64 = 10.0;
const AUDIT_SLACK: f64 = 1e-9;

fn audit_axis(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| AUDIT_LO + (AUDIT_HI - AUDIT_LO) * i as f64 / (n - 1) as f64)
        .collect()
}

fn worst_ratio<const D: usize>(points: &[([f64; D], f64)]) -> f64 {
    let mut worst = 0.0_f64;
    for (i, (p, fp)) in points.iter().enumerate() {
        for (q, fq) in &points[i + 1..] {
            let dist2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            let ratio = (fp - fq) * (fp - fq) / dist2;
            worst = worst.max(ratio);
        }
    }
    worst
}

/// Sampled Lipschitz audit of `f` (10³ points on `[-10,10]³`) and `g` (32²
/// points on `[-10,10]²`): reports the largest observed `|Δf|²/|Δinput|²` and
/// whether it stays within the declared constant.
pub fn validate_problem(spec: &ProblemSpec) -> Result<AuditReport> {
    let axis = audit_axis(10);
    let mut f_points = Vec::with_capacity(1000);
    for &x in &axis {
        for &y in &axis {
            for &z in &axis {
                let v = spec.f(x, y, z);
                if !v.is_finite() {
                    return Err(Error::Validation(format!("f({x}, {y}, {z}) is not finite")));
                }
                f_points.push(([x, y, z], v));
            }
        }
    }
    let axis_g = audit_axis(32);
    let mut g_points = Vec::with_capacity(axis_g.len() * axis_g.len());
    for &x in &axis_g {
        for &y in &axis_g {
            let v = spec.g(x, y);
            if !v.is_finite() {
                return Err(Error::Validation(format!("g({x}, {y}) is not finite")));
            }
            g_points.push(([x, y], v));
        }
    }
    let worst_ratio_f = worst_ratio(&f_points);
    let worst_ratio_g = worst_ratio(&g_points);
    Ok(AuditReport {
        worst_ratio_f,
        worst_ratio_g,
        pass_f: worst_ratio_f <= spec.lipschitz_f * (1.0 + AUDIT_SLACK) + f64::EPSILON,
        pass_g: worst_ratio_g <= spec.lipschitz_g * (1.0 + AUDIT_SLACK) + f64::EPSILON,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn martingale_coefficients() {
        let (spec, _) = make_builtin_case(CaseTag::Martingale, CaseParams::default()).unwrap();
        assert_eq!(spec.f(0.3, 1.0, 2.0), 0.0);
        assert_eq!(spec.g(1.0, 1.0), 0.0);
        assert_eq!(spec.phi(5.0), 5.0);
        assert_eq!(spec.b(3.0), 0.0);
        assert_eq!(spec.sigma(3.0), 1.0);
    }

    #[test]
    fn linear_drivers() {
        let params = CaseParams {
            a: 0.5,
            c: 0.2,
            ..Default::default()
        };
        let (lf, _) = make_builtin_case(CaseTag::LinearF, params).unwrap();
        for x in [-3.0, 0.0, 7.5] {
            assert_eq!(lf.f(x, 2.0, -1.0), 1.0);
        }
        let (lg, _) = make_builtin_case(CaseTag::LinearG, params).unwrap();
        for x in [-3.0, 0.0, 7.5] {
            assert!((lg.g(x, 3.0) - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_tag_rejected() {
        assert!(matches!("cubic".parse::<CaseTag>(), Err(Error::Config(_))));
        assert_eq!("linear_g".parse::<CaseTag>().unwrap(), CaseTag::LinearG);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let params = CaseParams {
            a: f64::NAN,
            ..Default::default()
        };
        assert!(make_builtin_case(CaseTag::LinearF, params).is_err());
    }

    #[test]
    fn audit_martingale_zero_ratio() {
        let (spec, _) = make_builtin_case(CaseTag::Martingale, CaseParams::default()).unwrap();
        let report = validate_problem(&spec).unwrap();
        assert!(report.passed());
        assert_eq!(report.worst_ratio_f, 0.0);
        assert_eq!(report.worst_ratio_g, 0.0);
    }

    #[test]
    fn audit_linear_f_declared_constants() {
        let (mut spec, _) = make_builtin_case(CaseTag::LinearF, CaseParams::default()).unwrap();
        let report = validate_problem(&spec).unwrap();
        assert!(report.pass_f);
        assert!((report.worst_ratio_f - 0.25).abs() < 1e-12);

        spec.lipschitz_f = 0.1;
        let report = validate_problem(&spec).unwrap();
        assert!(!report.pass_f);
        assert!((report.worst_ratio_f - 0.25).abs() < 1e-12);
    }

    #[test]
    fn every_builtin_passes_its_own_audit() {
        for tag in CaseTag::ALL {
            let (spec, _) = make_builtin_case(tag, CaseParams::default()).unwrap();
            assert!(validate_problem(&spec).unwrap().passed(), "{tag}");
        }
    }

    #[test]
    fn non_finite_driver_reported() {
        let (mut spec, _) = make_builtin_case(CaseTag::Martingale, CaseParams::default()).unwrap();
        spec.driver = Arc::new(|x, _, _| if x > 5.0 { f64::INFINITY } else { 0.0 });
        assert!(matches!(validate_problem(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn invalid_horizon() {
        let (spec, _) = make_builtin_case(CaseTag::Martingale, CaseParams::default()).unwrap();
        let err = ProblemSpec::new(
            spec.drift.clone(),
            spec.diffusion.clone(),
            spec.driver.clone(),
            spec.backward_driver.clone(),
            spec.terminal.clone(),
            0.0,
            0.0,
            0.0,
            0.0,
        );
        assert!(err.is_err());
    }
}
