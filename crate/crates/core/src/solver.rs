//! The regression Monte-Carlo scheme: terminal projection, backward induction
//! with Picard iterations per step, and sample-level truncation of the
//! approximations of `Y` and `Z`.
//!
//! At step `k` the coefficients `θ = (α, √h β)` solve
//!
//! ```text
//! argmin_θ (1/M) Σ_m | Ŷ^m_{k+1} + h f(X^m_k, α^{i−1}·p^m_k, β^{i−1}·p^m_k)
//!                      + ΔB^m_k g(X^m_{k+1}, Ŷ^m_{k+1}) − θ·v^m_k |²
//! ```
//!
//! with `θ⁰ = 0`, where `Ŷ^m_{k+1}` is the truncated approximation at `k+1`.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, SampleBasis};
use crate::error::{Error, Result};
use crate::grid_paths::{PathBatch, TimeGrid};
use crate::model::ProblemSpec;
use crate::regression::{
    gram_matrices, localization_from_spectra, moment, LeastSquaresFactor, LocalizationReport, Spectrum,
};

/// The C²_b clipping function: identity on `[−3/2, 3/2]`, a sine-tapered
/// transition on `3/2 < |x| < 5/2`, constant `±2` beyond. Odd, `|ξ| ≤ 2`,
/// `|ξ'| ≤ 1`.
pub fn xi(x: f64) -> f64 {
    let a = x.abs();
    let y = if a <= 1.5 {
        a
    } else if a < 2.5 {
        let s = a - 1.5;
        1.5 + 0.5 * s + (std::f64::consts::PI * s).sin() / (2.0 * std::f64::consts::PI)
    } else {
        2.0
    };
    y.copysign(x)
}

/// Derivative of [`xi`].
pub fn xi_derivative(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.5 {
        1.0
    } else if a < 2.5 {
        0.5 + 0.5 * (std::f64::consts::PI * (a - 1.5)).cos()
    } else {
        0.0
    }
}

/// `ρ̂(x) = ρ ξ(x/ρ)`; the identity when `ρ` is infinite.
#[inline]
pub fn rho_hat(rho: f64, x: f64) -> f64 {
    if rho.is_infinite() || x.abs() <= 1.5 * rho {
        x
    } else {
        rho * xi(x / rho)
    }
}

/// How the a-priori constant `C0` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum C0Mode {
    Fixed { value: f64 },
    /// `C0 = safety · max_k (E|Ŷ_k|² + h E|Ẑ_k|²)` from an untruncated pilot
    /// solve on `paths` independent paths (default: the solve's own `M`).
    Pilot {
        #[serde(default = "default_safety")]
        safety: f64,
        #[serde(default)]
        paths: Option<usize>,
    },
}

fn default_safety() -> f64 {
    4.0
}

impl Default for C0Mode {
    fn default() -> Self {
        C0Mode::Pilot {
            safety: default_safety(),
            paths: None,
        }
    }
}

/// Sample-level truncation: `ρ^m_k = ζ^m_k = max(|p^m_k| √C0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationProfile {
    pub c0: f64,
}

impl TruncationProfile {
    pub fn fixed(c0: f64) -> Result<Self> {
        if !(c0 > 0.0) || c0.is_nan() {
            return Err(Error::config(format!("C0 must be > 0, got {c0}")));
        }
        Ok(Self { c0 })
    }

    /// No truncation at all (`C0 = ∞`).
    pub fn disabled() -> Self {
        Self { c0: f64::INFINITY }
    }

    #[inline]
    pub fn level(&self, p_norm: f64) -> f64 {
        if self.c0.is_infinite() {
            f64::INFINITY
        } else {
            (p_norm * self.c0.sqrt()).max(1.0)
        }
    }

    /// `C0` from an untruncated pilot solve that kept its pathwise values.
    pub fn from_pilot(report: &SolveReport, safety: f64) -> Result<Self> {
        let paths = report
            .paths
            .as_ref()
            .ok_or_else(|| Error::Numerical("pilot solve did not keep pathwise values".into()))?;
        let mut worst = 0.0_f64;
        for k in 0..=paths.n_steps {
            let (mut ey, mut ez) = (0.0, 0.0);
            for m in 0..paths.n_paths {
                ey += paths.y(m, k).powi(2);
                ez += paths.z(m, k).powi(2);
            }
            let n = paths.n_paths as f64;
            worst = worst.max(ey / n + report.h * ez / n);
        }
        if !worst.is_finite() {
            return Err(Error::Numerical(
                "pilot solve produced non-finite values; configure a fixed C0".into(),
            ));
        }
        Self::fixed(safety * worst.max(f64::MIN_POSITIVE))
    }
}

/// Which `β` enters the driver during the Picard pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardBeta {
    /// Previous iterate `β^{i−1}` feeds `f`, `(α, β)` re-fitted jointly.
    #[default]
    Refit,
    /// `β` fitted once from the driver-free target and held fixed.
    Freeze,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub iterations: usize,
    pub picard_beta: PicardBeta,
    pub keep_paths: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            iterations: 2,
            picard_beta: PicardBeta::Refit,
            keep_paths: false,
        }
    }
}

/// Regression coefficients per step: `alpha[k]` and `beta[k]` have length
/// `D_k`; `beta[N]` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCoefficients {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl ThetaCoefficients {
    /// `θ_k = (α_k, √h β_k)`.
    pub fn theta(&self, k: usize, h: f64) -> Vec<f64> {
        let s = h.sqrt();
        self.alpha[k]
            .iter()
            .copied()
            .chain(self.beta[k].iter().map(|b| b * s))
            .collect()
    }
}

/// Truncated pathwise approximations, row-major `M × (N+1)`; `Z_N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseSolution {
    pub n_paths: usize,
    pub n_steps: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl PathwiseSolution {
    pub fn zeros(n_paths: usize, n_steps: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            y: vec![0.0; n_paths * (n_steps + 1)],
            z: vec![0.0; n_paths * (n_steps + 1)],
        }
    }

    #[inline]
    pub fn y(&self, m: usize, k: usize) -> f64 {
        self.y[m * (self.n_steps + 1) + k]
    }

    #[inline]
    pub fn z(&self, m: usize, k: usize) -> f64 {
        self.z[m * (self.n_steps + 1) + k]
    }

    pub fn set(&mut self, m: usize, k: usize, y: f64, z: f64) {
        self.y[m * (self.n_steps + 1) + k] = y;
        self.z[m * (self.n_steps + 1) + k] = z;
    }
}

/// Picard trace and localization of one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub localization: LocalizationReport,
    /// `A^M_k`: `event_ok` holds at every step `j ≥ k`.
    pub cumulative_ok: bool,
    pub rank: usize,
    /// `|θ^i|` for `i = 1..=I`.
    pub picard_norms: Vec<f64>,
    /// `|θ^i − θ^{i−1}|` for `i = 1..=I`.
    pub picard_diffs: Vec<f64>,
    /// `|θ^{i+1} − θ^i| / |θ^i − θ^{i−1}|` for `i = 1..I`.
    pub picard_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub basis_ms: f64,
    pub gram_ms: f64,
    pub spectra_ms: f64,
    pub picard_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub n_steps: usize,
    pub h: f64,
    pub n_paths: usize,
    pub truncation: TruncationProfile,
    pub theta: ThetaCoefficients,
    pub y0_pathwise: Vec<f64>,
    pub y0_mean: f64,
    pub y0_std: f64,
    pub paths: Option<PathwiseSolution>,
    /// Indexed by `k = 0..N−1`.
    pub steps: Vec<StepDiagnostics>,
    pub timings: PhaseTimings,
    pub basis_fingerprint: u64,
}

impl SolveReport {
    /// Equality of every computed quantity (timings excluded).
    pub fn same_results(&self, other: &SolveReport) -> bool {
        self.n_steps == other.n_steps
            && self.h == other.h
            && self.n_paths == other.n_paths
            && self.truncation == other.truncation
            && self.theta == other.theta
            && self.y0_pathwise == other.y0_pathwise
            && self.y0_mean.to_bits() == other.y0_mean.to_bits()
            && self.y0_std.to_bits() == other.y0_std.to_bits()
            && self.paths == other.paths
            && self.steps == other.steps
            && self.basis_fingerprint == other.basis_fingerprint
    }

    pub fn event_ok_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        self.steps.iter().filter(|s| s.localization.event_ok).count() as f64 / self.steps.len() as f64
    }

    /// Per-step CSV: `k,t,|alpha|,|beta|,norm_V,norm_P,event_ok,picard_last_ratio`.
    /// The terminal row leaves the regression columns empty.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k",
            "t",
            "|alpha|",
            "|beta|",
            "norm_V",
            "norm_P",
            "event_ok",
            "picard_last_ratio",
        ])?;
        for k in 0..=self.n_steps {
            let a = l2(&self.theta.alpha[k]);
            let b = l2(&self.theta.beta[k]);
            let mut row = vec![k.to_string(), grid.times[k].to_string(), a.to_string(), b.to_string()];
            match self.steps.get(k) {
                Some(s) => {
                    row.push(s.localization.norm_v.to_string());
                    row.push(s.localization.norm_p.to_string());
                    row.push(s.localization.event_ok.to_string());
                    row.push(s.picard_ratios.last().map(|r| r.to_string()).unwrap_or_default());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Regression diagnostics CSV: `k,norm_V,norm_P,lambda_min,event_ok`.
    pub fn write_diagnostics_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "norm_V", "norm_P", "lambda_min", "event_ok"])?;
        for s in &self.steps {
            w.write_record([
                s.k.to_string(),
                s.localization.norm_v.to_string(),
                s.localization.norm_p.to_string(),
                s.localization.lambda_min.to_string(),
                s.localization.event_ok.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "y0_mean": self.y0_mean,
            "y0_std": self.y0_std,
            "M": self.n_paths,
            "N": self.n_steps,
            "h": self.h,
            "C0": self.truncation.c0,
            "event_ok_fraction": self.event_ok_fraction(),
            "A_M_0": self.steps.first().map(|s| s.cumulative_ok).unwrap_or(true),
            "runtime_ms": {
                "basis": self.timings.basis_ms,
                "gram": self.timings.gram_ms,
                "spectra": self.timings.spectra_ms,
                "picard": self.timings.picard_ms,
                "total": self.timings.total_ms,
            }
        })
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn check_compatible(grid: &TimeGrid, basis: &BasisSystem, batch: &PathBatch) -> Result<()> {
    if basis.n_steps != grid.n_steps || batch.n_steps != grid.n_steps {
        return Err(Error::BasisMismatch(format!(
            "grid has N = {}, basis N = {}, batch N = {}",
            grid.n_steps, basis.n_steps, batch.n_steps
        )));
    }
    if basis.h != grid.h {
        return Err(Error::BasisMismatch("basis built for a different step size".into()));
    }
    Ok(())
}

/// `α_N`: regression of `Φ(X_N)` on the base block `p_N`.
pub fn project_terminal(batch: &PathBatch, basis: &BasisSystem, spec: &ProblemSpec) -> Result<Vec<f64>> {
    let n = basis.n_steps;
    let p = basis.eval_batch(n, batch);
    let targets: Vec<f64> = (0..batch.n_paths).map(|m| spec.phi(batch.x(m, n))).collect();
    let sol = crate::regression::solve_least_squares(&p, &targets)?;
    Ok(sol.theta.as_slice().to_vec())
}

/// Everything one backward step needs for its Picard pass.
pub struct StepProblem<'a> {
    pub spec: &'a ProblemSpec,
    pub h: f64,
    pub p: &'a SampleBasis,
    pub v: &'a SampleBasis,
    pub factor: &'a LeastSquaresFactor,
    /// `X^m_k`.
    pub x: &'a [f64],
    /// `Ŷ^m_{k+1} + ΔB^m_k g(X^m_{k+1}, Ŷ^m_{k+1})`.
    pub base_target: &'a [f64],
    /// `√h β` held fixed in [`PicardBeta::Freeze`] mode.
    pub frozen_beta: Option<&'a [f64]>,
}

impl StepProblem<'_> {
    pub fn dim(&self) -> usize {
        self.p.dim
    }

    /// Regression target for the iterate `θ^{i−1}`.
    pub fn target(&self, theta_prev: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let (alpha, scaled_beta) = theta_prev.split_at(d);
        let scaled_beta = self.frozen_beta.unwrap_or(scaled_beta);
        let inv_sqrt_h = 1.0 / self.h.sqrt();
        (0..self.x.len())
            .map(|m| {
                let y = self.p.dot(m, alpha);
                let z = self.p.dot(m, scaled_beta) * inv_sqrt_h;
                self.base_target[m] + self.h * self.spec.f(self.x[m], y, z)
            })
            .collect()
    }

    /// One Picard step `θ^{i−1} ↦ θ^i`.
    pub fn picard_iterate(&self, theta_prev: &[f64]) -> Result<Vec<f64>> {
        let rhs = moment(self.v, &self.target(theta_prev))?;
        let mut theta = self.factor.solve(&rhs).as_slice().to_vec();
        if let Some(fb) = self.frozen_beta {
            theta[self.dim()..].copy_from_slice(fb);
        }
        Ok(theta)
    }
}

/// Truncated `(Y^m_k, Z^m_k)` on a sample basis.
fn truncated_values(
    p: &SampleBasis,
    alpha: &[f64],
    beta: &[f64],
    trunc: &TruncationProfile,
    sqrt_h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = p.n_samples();
    let mut ys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let has_beta = beta.iter().any(|&b| b != 0.0);
    for m in 0..n {
        let level = trunc.level(p.norm(m));
        ys.push(rho_hat(level, p.dot(m, alpha)));
        zs.push(if has_beta {
            rho_hat(level, sqrt_h * p.dot(m, beta)) / sqrt_h
        } else {
            0.0
        });
    }
    (ys, zs)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the full backward induction.
pub fn backward_solve(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &BasisSystem,
    batch: &PathBatch,
    options: &SolverOptions,
    truncation: &TruncationProfile,
) -> Result<SolveReport> {
    check_compatible(grid, basis, batch)?;
    if options.iterations == 0 {
        return Err(Error::config("number of Picard iterations I must be >= 1"));
    }
    let h = grid.h;
    if h * h * spec.lipschitz_f >= 1.0 {
        return Err(Error::config(format!(
            "h²·L_f = {} >= 1: implicit step is not contractive; increase N",
            h * h * spec.lipschitz_f
        )));
    }
    let n = grid.n_steps;
    let m_paths = batch.n_paths;
    let max_dim = (0..=n).map(|k| basis.dim(k)).max().unwrap_or(0);
    if m_paths < 2 * max_dim {
        warn!(
            "M = {m_paths} < 2·max D_k = {}: Gram matrices are singular, relying on truncation",
            2 * max_dim
        );
    }
    let sqrt_h = grid.sqrt_h();
    let start = Instant::now();
    let mut timings = PhaseTimings::default();
    let mut alpha = vec![Vec::new(); n + 1];
    let mut beta = vec![Vec::new(); n + 1];
    let mut paths = options.keep_paths.then(|| PathwiseSolution::zeros(m_paths, n));
    let mut steps: Vec<StepDiagnostics> = Vec::with_capacity(n);

    // terminal step
    let t = Instant::now();
    let p_next = basis.eval_batch(n, batch);
    timings.basis_ms += ms(t);
    let t = Instant::now();
    let targets: Vec<f64> = (0..m_paths).map(|m| spec.phi(batch.x(m, n))).collect();
    alpha[n] = crate::regression::solve_least_squares(&p_next, &targets)?
        .theta
        .as_slice()
        .to_vec();
    beta[n] = vec![0.0; basis.dim(n)];
    timings.picard_ms += ms(t);
    let (mut y_next, _) = truncated_values(&p_next, &alpha[n], &beta[n], truncation, sqrt_h);
    if let Some(paths) = paths.as_mut() {
        for (m, &y) in y_next.iter().enumerate() {
            paths.set(m, n, y, 0.0);
        }
    }

    for k in (0..n).rev() {
        let t = Instant::now();
        let p = basis.eval_batch(k, batch);
        let scaled_dw: Vec<f64> = (0..m_paths).map(|m| batch.dw(m, k) / sqrt_h).collect();
        let v = p.with_increment_copy(&scaled_dw)?;
        timings.basis_ms += ms(t);

        let t = Instant::now();
        let gram = gram_matrices(&v)?;
        timings.gram_ms += ms(t);

        let t = Instant::now();
        let spec_v = Spectrum::of(&gram.v);
        let spec_p = Spectrum::of(&gram.p);
        let localization = localization_from_spectra(&gram, &spec_v, &spec_p, h);
        let factor = LeastSquaresFactor::new(&gram.v, &spec_v)?;
        timings.spectra_ms += ms(t);

        let t = Instant::now();
        let d = p.dim;
        let x_k: Vec<f64> = (0..m_paths).map(|m| batch.x(m, k)).collect();
        let base_target: Vec<f64> = (0..m_paths)
            .map(|m| y_next[m] + batch.db(m, k) * spec.g(batch.x(m, k + 1), y_next[m]))
            .collect();
        let frozen = match options.picard_beta {
            PicardBeta::Refit => None,
            PicardBeta::Freeze => {
                let theta = factor.solve(&moment(&v, &base_target)?);
                Some(theta.as_slice()[d..].to_vec())
            }
        };
        let step = StepProblem {
            spec,
            h,
            p: &p,
            v: &v,
            factor: &factor,
            x: &x_k,
            base_target: &base_target,
            frozen_beta: frozen.as_deref(),
        };
        let mut theta = vec![0.0; 2 * d];
        let mut picard_norms = Vec::with_capacity(options.iterations);
        let mut picard_diffs = Vec::with_capacity(options.iterations);
        for _ in 0..options.iterations {
            let next = step.picard_iterate(&theta)?;
            let diff = l2(&next.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
            picard_norms.push(l2(&next));
            picard_diffs.push(diff);
            theta = next;
        }
        let picard_ratios = picard_diffs
            .windows(2)
            .map(|w| if w[1] == 0.0 { 0.0 } else { w[1] / w[0] })
            .collect();
        timings.picard_ms += ms(t);

        alpha[k] = theta[..d].to_vec();
        beta[k] = theta[d..].iter().map(|b| b / sqrt_h).collect();
        let (y_k, z_k) = truncated_values(&p, &alpha[k], &beta[k], truncation, sqrt_h);
        if let Some(paths) = paths.as_mut() {
            for m in 0..m_paths {
                paths.set(m, k, y_k[m], z_k[m]);
            }
        }
        y_next = y_k;

        steps.push(StepDiagnostics {
            k,
            localization,
            cumulative_ok: false,
            rank: factor.rank,
            picard_norms,
            picard_diffs,
            picard_ratios,
        });
    }
    steps.reverse();
    let mut all_ok = true;
    for s in steps.iter_mut().rev() {
        all_ok &= s.localization.event_ok;
        s.cumulative_ok = all_ok;
    }

    let (y0_mean, y0_std) = mean_std(&y_next);
    timings.total_ms = ms(start);
    Ok(SolveReport {
        n_steps: n,
        h,
        n_paths: m_paths,
        truncation: *truncation,
        theta: ThetaCoefficients { alpha, beta },
        y0_pathwise: y_next,
        y0_mean,
        y0_std,
        paths,
        steps,
        timings,
        basis_fingerprint: basis.fingerprint(),
    })
}

/// Builds the truncation profile; in pilot mode runs an untruncated solve on
/// `pilot` first.
pub fn make_truncation(
    mode: C0Mode,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &BasisSystem,
    pilot: Option<&PathBatch>,
    options: &SolverOptions,
) -> Result<TruncationProfile> {
    match mode {
        C0Mode::Fixed { value } => TruncationProfile::fixed(value),
        C0Mode::Pilot { safety, .. } => {
            if !(safety > 0.0) {
                return Err(Error::config("C0 pilot safety factor must be > 0"));
            }
            let batch = pilot.ok_or_else(|| Error::config("pilot C0 needs a pilot batch"))?;
            let opts = SolverOptions {
                keep_paths: true,
                ..*options
            };
            let report = backward_solve(spec, grid, basis, batch, &opts, &TruncationProfile::disabled())
                .map_err(|e| match e {
                    Error::NonFiniteTarget(_) | Error::Numerical(_) => Error::Numerical(format!(
                        "pilot solve diverged ({e}); configure a fixed C0"
                    )),
                    other => other,
                })?;
            TruncationProfile::from_pilot(&report, safety)
        }
    }
}

/// Applies stored coefficients and truncation to another batch.
pub fn evaluate_solution(report: &SolveReport, batch: &PathBatch, basis: &BasisSystem) -> Result<PathwiseSolution> {
    if basis.fingerprint() != report.basis_fingerprint {
        return Err(Error::BasisMismatch(
            "evaluation basis differs from the one used to fit the coefficients".into(),
        ));
    }
    if batch.n_steps != report.n_steps {
        return Err(Error::BasisMismatch(format!(
            "batch has N = {}, coefficients N = {}",
            batch.n_steps, report.n_steps
        )));
    }
    let sqrt_h = report.h.sqrt();
    let mut out = PathwiseSolution::zeros(batch.n_paths, report.n_steps);
    for k in 0..=report.n_steps {
        let p = basis.eval_batch(k, batch);
        let (ys, zs) = truncated_values(
            &p,
            &report.theta.alpha[k],
            &report.theta.beta[k],
            &report.truncation,
            sqrt_h,
        );
        for m in 0..batch.n_paths {
            out.set(m, k, ys[m], zs[m]);
        }
    }
    Ok(out)
}
