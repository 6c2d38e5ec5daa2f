//! Run configuration, single solves, convergence sweeps, oracle comparisons
//! and log-log rate fitting.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{assemble_basis, build_partitions, BasisSystem, DEFAULT_HARD_CAP};
use crate::error::{Error, Result};
use crate::grid_paths::{build_time_grid, derive_seed, simulate_paths, PathBatch, TimeGrid};
use crate::model::{make_builtin_case, CaseParams, CaseTag, ClosedForm, ProblemSpec};
use crate::oracle::{
    closed_form_discrete, closed_form_value, ideal_projection_theta, quadrature_scheme, IDEAL_MAX_CELLS,
    IDEAL_MAX_STEPS, QUADRATURE_MAX_STEPS,
};
use crate::solver::{
    backward_solve, evaluate_solution, make_truncation, C0Mode, PathwiseSolution, PicardBeta, SolveReport,
    SolverOptions, TruncationProfile,
};

const SOLVE_STREAM_TAG: u64 = 0x5017_e000;
const C0_PILOT_TAG: u64 = 0xc0c0_0001;
const HOLDOUT_TAG: u64 = 0x401d_0017;
const REPLICATE_TAG: u64 = 0x4e91_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub case: CaseTag,
    #[serde(default)]
    pub params: CaseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    #[serde(rename = "N")]
    pub n_steps: usize,
    #[serde(rename = "I")]
    pub iterations: usize,
    #[serde(rename = "M")]
    pub n_paths: usize,
    #[serde(rename = "L")]
    pub cells: usize,
    /// `null` or absent: full depth.
    #[serde(default)]
    pub depth_cap: Option<usize>,
    /// Defaults to `max(10000, 50·L)`.
    #[serde(default)]
    pub pilot_size: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub picard_beta: PicardBeta,
    #[serde(default)]
    pub c0: C0Mode,
    #[serde(default = "default_hard_cap")]
    pub hard_cap: usize,
}

fn default_hard_cap() -> usize {
    DEFAULT_HARD_CAP
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub paths: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub diagnostics: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub convergence: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    N,
    M,
    L,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(SweepAxis::N),
            "M" => Ok(SweepAxis::M),
            "L" => Ok(SweepAxis::L),
            other => Err(Error::config(format!("unknown sweep axis {other:?}; expected N, M or L"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::N => "N",
            SweepAxis::M => "M",
            SweepAxis::L => "L",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub levels: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_holdout")]
    pub holdout_paths: usize,
}

fn default_holdout() -> usize {
    20_000
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            holdout_paths: default_holdout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Parses and validates a JSON configuration. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        Error::config_at(if pointer.is_empty() { "/".into() } else { pointer }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scheme;
        for (ptr, v) in [
            ("/scheme/N", s.n_steps),
            ("/scheme/I", s.iterations),
            ("/scheme/M", s.n_paths),
            ("/scheme/L", s.cells),
            ("/scheme/hard_cap", s.hard_cap),
            ("/evaluation/holdout_paths", self.evaluation.holdout_paths),
        ] {
            if v == 0 {
                return Err(Error::config_at(ptr, "must be >= 1"));
            }
        }
        if s.depth_cap == Some(0) {
            return Err(Error::config_at("/scheme/depth_cap", "must be >= 1"));
        }
        if self.pilot_size() < 50 * s.cells {
            return Err(Error::config_at(
                "/scheme/pilot_size",
                format!("must be >= 50·L = {}", 50 * s.cells),
            ));
        }
        match s.c0 {
            C0Mode::Fixed { value } if !(value > 0.0 && value.is_finite()) => {
                return Err(Error::config_at("/scheme/c0/value", "must be a positive finite number"))
            }
            C0Mode::Pilot { safety, paths } => {
                if !(safety > 0.0 && safety.is_finite()) {
                    return Err(Error::config_at("/scheme/c0/safety", "must be > 0"));
                }
                if paths == Some(0) {
                    return Err(Error::config_at("/scheme/c0/paths", "must be >= 1"));
                }
            }
            _ => {}
        }
        let p = &self.problem.params;
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            return Err(Error::config_at("/problem/params/T", "must be > 0"));
        }
        if let Some(sw) = &self.sweep {
            validate_levels(&sw.levels, "/sweep/levels")?;
            if sw.replicates == 0 {
                return Err(Error::config_at("/sweep/replicates", "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn pilot_size(&self) -> usize {
        self.scheme.pilot_size.unwrap_or((50 * self.scheme.cells).max(10_000))
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            iterations: self.scheme.iterations,
            picard_beta: self.scheme.picard_beta,
            keep_paths: false,
        }
    }

    /// Copy with one axis set to `level`.
    pub fn with_level(&self, axis: SweepAxis, level: usize) -> RunConfig {
        let mut c = self.clone();
        match axis {
            SweepAxis::N => c.scheme.n_steps = level,
            SweepAxis::M => c.scheme.n_paths = level,
            SweepAxis::L => c.scheme.cells = level,
        }
        c
    }
}

fn validate_levels(levels: &[usize], pointer: &str) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::config_at(pointer, "needs at least one level"));
    }
    if levels.contains(&0) {
        return Err(Error::config_at(pointer, "levels must be >= 1"));
    }
    let up = levels.windows(2).all(|w| w[0] < w[1]);
    let down = levels.windows(2).all(|w| w[0] > w[1]);
    if !(up || down) {
        return Err(Error::config_at(pointer, "levels must be strictly monotone"));
    }
    Ok(())
}

/// Problem, grid and basis for a configuration.
pub struct Prepared {
    pub spec: ProblemSpec,
    pub closed_form: ClosedForm,
    pub grid: TimeGrid,
    pub basis: BasisSystem,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (spec, closed_form) = make_builtin_case(cfg.problem.case, cfg.problem.params)?;
    let grid = build_time_grid(spec.horizon, cfg.scheme.n_steps)?;
    let parts = build_partitions(&spec, &grid, cfg.scheme.cells, cfg.pilot_size(), cfg.scheme.seed)?;
    let basis = assemble_basis(parts, &grid, cfg.scheme.depth_cap, cfg.scheme.hard_cap)?;
    Ok(Prepared {
        spec,
        closed_form,
        grid,
        basis,
    })
}

pub struct SolveOutcome {
    pub prepared: Prepared,
    pub batch: PathBatch,
    pub report: SolveReport,
}

/// Builds everything from the config and runs one backward solve.
pub fn run_solve(cfg: &RunConfig) -> Result<SolveOutcome> {
    let prepared = prepare(cfg)?;
    let Prepared { spec, grid, basis, .. } = &prepared;
    let seed = cfg.scheme.seed;
    let batch = simulate_paths(spec, grid, cfg.scheme.n_paths, derive_seed(seed, SOLVE_STREAM_TAG))?;
    let opts = cfg.solver_options();
    let truncation = match cfg.scheme.c0 {
        C0Mode::Pilot { paths, .. } => {
            let pilot = simulate_paths(
                spec,
                grid,
                paths.unwrap_or(cfg.scheme.n_paths),
                derive_seed(seed, C0_PILOT_TAG),
            )?;
            make_truncation(cfg.scheme.c0, spec, grid, basis, Some(&pilot), &opts)?
        }
        mode => make_truncation(mode, spec, grid, basis, None, &opts)?,
    };
    let report = backward_solve(spec, grid, basis, &batch, &opts, &truncation)?;
    Ok(SolveOutcome {
        prepared,
        batch,
        report,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes the outputs named in the config of a finished solve.
pub fn write_solve_outputs(cfg: &RunConfig, out: &SolveOutcome) -> Result<()> {
    let o = &cfg.outputs;
    if let Some(p) = &o.paths {
        out.batch.write_csv(&out.prepared.grid, create(p)?)?;
    }
    if let Some(p) = &o.report {
        out.report.write_csv(&out.prepared.grid, create(p)?)?;
    }
    if let Some(p) = &o.diagnostics {
        out.report.write_diagnostics_csv(create(p)?)?;
    }
    if let Some(p) = &o.summary {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &out.report.summary_json())?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

/// Pathwise errors against a reference solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    /// `max_k mean_m |Y − Y_ref|²`, `k = 0..N`.
    pub err_y: f64,
    /// `h Σ_{k<N} mean_m |Z − Z_ref|²`.
    pub err_z: f64,
    /// Root mean square of `Y − Y_ref` over all paths and `k = 0..N`.
    pub rmse_y: f64,
    /// Root mean square of `Z − Z_ref` over all paths and `k < N`.
    pub rmse_z: f64,
}

pub fn error_metrics(approx: &PathwiseSolution, reference: &PathwiseSolution, h: f64) -> Result<ErrorMetrics> {
    if approx.n_paths != reference.n_paths || approx.n_steps != reference.n_steps {
        return Err(Error::Dimension("solutions differ in shape".into()));
    }
    let (mp, n) = (approx.n_paths, approx.n_steps);
    let mut err_y = 0.0_f64;
    let mut err_z = 0.0;
    let mut sum_y = 0.0;
    let mut sum_z = 0.0;
    for k in 0..=n {
        let (mut ey, mut ez) = (0.0, 0.0);
        for m in 0..mp {
            ey += (approx.y(m, k) - reference.y(m, k)).powi(2);
            ez += (approx.z(m, k) - reference.z(m, k)).powi(2);
        }
        err_y = err_y.max(ey / mp as f64);
        sum_y += ey;
        if k < n {
            err_z += h * ez / mp as f64;
            sum_z += ez;
        }
    }
    Ok(ErrorMetrics {
        err_y,
        err_z,
        rmse_y: (sum_y / (mp * (n + 1)) as f64).sqrt(),
        rmse_z: if n == 0 { 0.0 } else { (sum_z / (mp * n) as f64).sqrt() },
    })
}

/// Evaluates a solve on a fresh batch against the exact discrete solution.
pub fn holdout_errors(out: &SolveOutcome, holdout_paths: usize, seed: u64) -> Result<ErrorMetrics> {
    let p = &out.prepared;
    let batch = simulate_paths(&p.spec, &p.grid, holdout_paths, derive_seed(seed, HOLDOUT_TAG))?;
    let approx = evaluate_solution(&out.report, &batch, &p.basis)?;
    let reference = closed_form_discrete(&p.closed_form, &batch, &p.grid)?;
    error_metrics(&approx, &reference, p.grid.h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub case: CaseTag,
    pub axis: SweepAxis,
    pub level: usize,
    pub replicate: usize,
    pub seed: u64,
    pub n_steps: usize,
    pub h: f64,
    pub cells: usize,
    pub n_paths: usize,
    pub iterations: usize,
    pub err_y: f64,
    pub err_z: f64,
    pub p_event_ok: f64,
    pub runtime_ms: f64,
    /// Not part of the CSV schema.
    pub rmse_y: f64,
    pub rmse_z: f64,
}

pub const CONVERGENCE_HEADER: [&str; 14] = [
    "case",
    "axis",
    "level",
    "replicate",
    "seed",
    "N",
    "h",
    "L",
    "M",
    "I",
    "errY",
    "errZ",
    "p_event_ok",
    "runtime_ms",
];

/// Seed of replicate `r`; shared by every level of a sweep.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    derive_seed(base, REPLICATE_TAG + r as u64)
}

/// For each level and replicate: simulate, solve, evaluate on a hold-out
/// batch against the exact discrete solution. Rows are ordered by level,
/// then replicate.
pub fn run_convergence(cfg: &RunConfig, axis: SweepAxis, levels: &[usize], replicates: usize) -> Result<Vec<ConvergenceRow>> {
    validate_levels(levels, "/sweep/levels")?;
    if replicates == 0 {
        return Err(Error::config_at("/sweep/replicates", "must be >= 1"));
    }
    let jobs: Vec<(usize, usize)> = levels
        .iter()
        .flat_map(|&l| (0..replicates).map(move |r| (l, r)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(level, r)| {
            let mut c = cfg.with_level(axis, level);
            c.scheme.seed = replicate_seed(cfg.scheme.seed, r);
            c.validate()?;
            let t = Instant::now();
            let out = run_solve(&c)?;
            let errs = holdout_errors(&out, c.evaluation.holdout_paths, c.scheme.seed)?;
            Ok(ConvergenceRow {
                case: c.problem.case,
                axis,
                level,
                replicate: r,
                seed: c.scheme.seed,
                n_steps: c.scheme.n_steps,
                h: out.prepared.grid.h,
                cells: c.scheme.cells,
                n_paths: c.scheme.n_paths,
                iterations: c.scheme.iterations,
                err_y: errs.err_y,
                err_z: errs.err_z,
                p_event_ok: out.report.event_ok_fraction(),
                runtime_ms: t.elapsed().as_secs_f64() * 1e3,
                rmse_y: errs.rmse_y,
                rmse_z: errs.rmse_z,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let order = |l: usize| levels.iter().position(|&x| x == l).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (order(r.level), r.replicate));
    Ok(rows)
}

/// Writes convergence rows; appends to an existing file with the same
/// header, otherwise (re)creates it with a header.
pub fn write_convergence_csv(rows: &[ConvergenceRow], path: &Path) -> Result<()> {
    let expected = CONVERGENCE_HEADER.join(",");
    let append = std::fs::read_to_string(path)
        .map(|s| s.lines().next() == Some(expected.as_str()))
        .unwrap_or(false);
    let file = if append {
        OpenOptions::new().append(true).open(path)?
    } else {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        File::create(path)?
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !append {
        w.write_record(CONVERGENCE_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.case.as_str().to_string(),
            r.axis.to_string(),
            r.level.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.n_steps.to_string(),
            r.h.to_string(),
            r.cells.to_string(),
            r.n_paths.to_string(),
            r.iterations.to_string(),
            r.err_y.to_string(),
            r.err_z.to_string(),
            r.p_event_ok.to_string(),
            format!("{:.3}", r.runtime_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Result of an ordinary least-squares fit `log y = a + slope · log x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Fits on `(log x, log y)`. Fewer than two points give a NaN slope; two
/// points give a NaN standard error.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("x and y differ in length".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Numerical("log-log fit needs positive values".into()));
    }
    let n = xs.len();
    if n < 2 {
        return Ok(SlopeFit {
            slope: f64::NAN,
            stderr: f64::NAN,
            intercept: f64::NAN,
        });
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("log-log fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if n > 2 {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorColumn {
    ErrY,
    ErrZ,
    RmseY,
    RmseZ,
}

/// Per-level replicate means of a column, in first-appearance order of the
/// levels.
pub fn level_means(rows: &[ConvergenceRow], column: ErrorColumn) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let v = match column {
            ErrorColumn::ErrY => r.err_y,
            ErrorColumn::ErrZ => r.err_z,
            ErrorColumn::RmseY => r.rmse_y,
            ErrorColumn::RmseZ => r.rmse_z,
        };
        match out.iter_mut().find(|e| e.0 == r.level) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => out.push((r.level, v, 1)),
        }
    }
    out.into_iter().map(|(l, s, c)| (l, s / c as f64)).collect()
}

/// Log-log slope of the replicate-averaged column against the level.
pub fn fit_loglog_slope(rows: &[ConvergenceRow], column: ErrorColumn) -> Result<SlopeFit> {
    let means = level_means(rows, column);
    let xs: Vec<f64> = means.iter().map(|m| m.0 as f64).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.1).collect();
    loglog_fit(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckRow {
    pub case: CaseTag,
    pub n_steps: usize,
    pub cells: usize,
    pub n_paths: usize,
    pub metric: String,
    pub value: f64,
    pub reference: f64,
}

impl OracleCheckRow {
    pub fn abs_err(&self) -> f64 {
        (self.value - self.reference).abs()
    }

    pub fn rel_err(&self) -> f64 {
        if self.reference == 0.0 {
            f64::NAN
        } else {
            self.abs_err() / self.reference.abs()
        }
    }
}

/// Compares the Monte-Carlo solve with the oracles that apply to the
/// configuration: closed form always, quadrature for `N <= 3`, ideal
/// projection for `N <= 2`, `L <= 3` at full depth.
pub fn run_oracle_check(cfg: &RunConfig) -> Result<Vec<OracleCheckRow>> {
    let out = run_solve(cfg)?;
    let p = &out.prepared;
    let (n, cells, mp) = (cfg.scheme.n_steps, cfg.scheme.cells, cfg.scheme.n_paths);
    let row = |metric: &str, value: f64, reference: f64| OracleCheckRow {
        case: cfg.problem.case,
        n_steps: n,
        cells,
        n_paths: mp,
        metric: metric.to_string(),
        value,
        reference,
    };
    let mut rows = Vec::new();

    let holdout = simulate_paths(
        &p.spec,
        &p.grid,
        cfg.evaluation.holdout_paths,
        derive_seed(cfg.scheme.seed, HOLDOUT_TAG),
    )?;
    let approx = evaluate_solution(&out.report, &holdout, &p.basis)?;
    let exact = closed_form_discrete(&p.closed_form, &holdout, &p.grid)?;
    let mean0 = |s: &PathwiseSolution| (0..s.n_paths).map(|m| s.y(m, 0)).sum::<f64>() / s.n_paths as f64;
    rows.push(row("y0_mean", mean0(&approx), mean0(&exact)));
    let errs = error_metrics(&approx, &exact, p.grid.h)?;
    rows.push(row("errY", errs.err_y, 0.0));
    rows.push(row("errZ", errs.err_z, 0.0));
    rows.push(row("p_event_ok", out.report.event_ok_fraction(), 1.0));

    if n <= QUADRATURE_MAX_STEPS {
        let q = quadrature_scheme(&p.spec, &p.grid, 16)?;
        let (mut dy, mut dz) = (0.0_f64, 0.0_f64);
        for k in 0..=n {
            for s in 0..q.n_states() {
                let st = q.state(k, s);
                let (y, z) = closed_form_value(&p.closed_form, &p.grid, k, st.x, &st.db_tail)?;
                dy = dy.max((q.y(k, s) - y).abs());
                dz = dz.max((q.z(k, s) - z).abs());
            }
        }
        rows.push(row("quadrature_max_abs_dY", dy, 0.0));
        rows.push(row("quadrature_max_abs_dZ", dz, 0.0));
    }
    if n <= IDEAL_MAX_STEPS && cells <= IDEAL_MAX_CELLS && p.basis.depth_cap >= n {
        let ideal = ideal_projection_theta(&p.spec, &p.grid, &p.basis, cfg.scheme.iterations, cfg.scheme.picard_beta)?;
        let h = p.grid.h;
        let dist = l2_diff(&out.report.theta.theta(0, h), &ideal.iterated.theta(0, h));
        rows.push(row("theta0_distance_to_ideal", dist, 0.0));
    }
    Ok(rows)
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn write_oracle_csv<W: Write>(rows: &[OracleCheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["case", "N", "L", "M", "metric", "value", "reference", "abs_err", "rel_err"])?;
    for r in rows {
        w.write_record([
            r.case.as_str().to_string(),
            r.n_steps.to_string(),
            r.cells.to_string(),
            r.n_paths.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            r.reference.to_string(),
            r.abs_err().to_string(),
            r.rel_err().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience for tests and the CLI: a solve with a given truncation.
pub fn solve_with_truncation(cfg: &RunConfig, truncation: &TruncationProfile) -> Result<SolveOutcome> {
    let prepared = prepare(cfg)?;
    let batch = simulate_paths(
        &prepared.spec,
        &prepared.grid,
        cfg.scheme.n_paths,
        derive_seed(cfg.scheme.seed, SOLVE_STREAM_TAG),
    )?;
    let report = backward_solve(
        &prepared.spec,
        &prepared.grid,
        &prepared.basis,
        &batch,
        &cfg.solver_options(),
        truncation,
    )?;
    Ok(SolveOutcome {
        prepared,
        batch,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {"case": "martingale"},
        "scheme": {"N": 4, "M": 1000, "L": 2, "I": 2, "seed": 7}
    }"#;

    #[test]
    fn minimal_config_echoes_values() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.problem.case, CaseTag::Martingale);
        assert_eq!(cfg.scheme.n_steps, 4);
        assert_eq!(cfg.scheme.n_paths, 1000);
        assert_eq!(cfg.scheme.cells, 2);
        assert_eq!(cfg.scheme.iterations, 2);
        assert_eq!(cfg.scheme.seed, 7);
        assert_eq!(cfg.scheme.picard_beta, PicardBeta::Refit);
        assert_eq!(cfg.scheme.c0, C0Mode::Pilot { safety: 4.0, paths: None });
    }

    #[test]
    fn zero_steps_is_reported_at_pointer() {
        let text = MINIMAL.replace("\"N\": 4", "\"N\": 0");
        match parse_config(&text).unwrap_err() {
            Error::ConfigAt { pointer, .. } => assert_eq!(pointer, "/scheme/N"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"foo\": 1");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn type_mismatch_names_pointer() {
        let text = MINIMAL.replace("\"M\": 1000", "\"M\": \"many\"");
        match parse_config(&text).unwrap_err() {
            Error::ConfigAt { pointer, .. } => assert_eq!(pointer, "/scheme/M"),
            other => panic!("unexpected {other}"),
        }
        let text = MINIMAL.replace("\"martingale\"", "\"nope\"");
        match parse_config(&text).unwrap_err() {
            Error::ConfigAt { pointer, .. } => assert_eq!(pointer, "/problem/case"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sweep_levels_must_be_monotone() {
        let text = MINIMAL.replace(
            "\"seed\": 7}",
            "\"seed\": 7}, \"sweep\": {\"axis\": \"M\", \"levels\": [100, 50, 200]}",
        );
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn loglog_examples() {
        let f = loglog_fit(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-14);
        assert!(f.stderr.abs() < 1e-14);
        let f = loglog_fit(&[1.0, 2.0, 4.0, 8.0], &[1.0, 0.5, 0.25, 0.125]).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-14);
        let f = loglog_fit(&[3.0], &[1.0]).unwrap();
        assert!(f.slope.is_nan());
        let f = loglog_fit(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!(f.stderr.is_nan() && f.slope.is_finite());
        assert!(loglog_fit(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn loglog_noisy_half_rate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..8).map(|i| 1000.0 * 2f64.powi(i)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 * x.powf(-0.5) * (1.0 + 0.01 * rng.random_range(-1.0..1.0)))
            .collect();
        let f = loglog_fit(&xs, &ys).unwrap();
        assert!(f.slope > -0.55 && f.slope < -0.45);
    }

    #[test]
    fn zero_problem_has_zero_errors() {
        let a = PathwiseSolution::zeros(10, 3);
        let e = error_metrics(&a, &a, 0.25).unwrap();
        assert_eq!((e.err_y, e.err_z, e.rmse_y, e.rmse_z), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn solve_is_deterministic() {
        let cfg = parse_config(MINIMAL).unwrap();
        let a = run_solve(&cfg).unwrap();
        let b = run_solve(&cfg).unwrap();
        assert!(a.report.same_results(&b.report));
    }

    #[test]
    fn single_level_sweep() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.scheme.n_steps = 2;
        cfg.evaluation.holdout_paths = 500;
        let rows = run_convergence(&cfg, SweepAxis::M, &[400], 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(fit_loglog_slope(&rows, ErrorColumn::ErrY).unwrap().slope.is_nan());
        let again = run_convergence(&cfg, SweepAxis::M, &[400], 3).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.err_y.to_bits(), b.err_y.to_bits());
            assert_eq!(a.err_z.to_bits(), b.err_z.to_bits());
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn convergence_csv_appends_under_one_header() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.scheme.n_steps = 1;
        cfg.evaluation.holdout_paths = 200;
        let rows = run_convergence(&cfg, SweepAxis::M, &[200, 400], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.csv");
        write_convergence_csv(&rows, &path).unwrap();
        write_convergence_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CONVERGENCE_HEADER.join(","));
        assert_eq!(lines.len(), 5);
        assert_eq!(lines.iter().filter(|l| l.starts_with("case,")).count(), 1);
    }
}
