//! Reference solutions used to check the Monte-Carlo scheme.
//!
//! * [`closed_form_discrete`]: the exact solution of the time-discrete scheme
//!   for the builtin cases, evaluated on simulated increments.
//! * [`QuadratureScheme`]: the implicit discrete scheme with every conditional
//!   expectation replaced by a Gauss–Hermite rule in `ΔW_{k+1}`, on the full
//!   tensor grid of `(ΔW_1..ΔW_k, ΔB_k..ΔB_{N−1})`.
//! * [`ideal_projection_theta`]: the regression coefficients the scheme would
//!   produce with `M = ∞`, computed by piecewise Gauss–Legendre integration
//!   against the Gaussian law of the increments.

use gauss_quad::{GaussHermite, GaussLegendre};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::grid_paths::{PathBatch, TimeGrid};
use crate::model::{ClosedForm, ProblemSpec};
use crate::solver::{PathwiseSolution, PicardBeta, ThetaCoefficients};

const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_MAX_ITER: usize = 200;

/// Exact `(Y_k, Z_k)` of the discrete scheme given `X_k` and
/// `db_tail = (ΔB_k, …, ΔB_{N−1})`. `Z_N` is reported as 0.
pub fn closed_form_value(cf: &ClosedForm, grid: &TimeGrid, k: usize, x: f64, db_tail: &[f64]) -> Result<(f64, f64)> {
    let n = grid.n_steps;
    let h = grid.h;
    let remaining = (n - k) as i32;
    let terminal = k == n;
    Ok(match *cf {
        ClosedForm::Martingale { sigma } => (x, if terminal { 0.0 } else { sigma }),
        ClosedForm::LinearF { a, sigma } => {
            if a * h >= 1.0 {
                return Err(Error::config(format!(
                    "a·h = {} >= 1: implicit step is not contractive",
                    a * h
                )));
            }
            let r = 1.0 / (1.0 - a * h);
            let z = if terminal { 0.0 } else { sigma * r.powi(remaining - 1) };
            (x * r.powi(remaining), z)
        }
        ClosedForm::ConstantG { c, sigma } => (
            x + c * db_tail.iter().sum::<f64>(),
            if terminal { 0.0 } else { sigma },
        ),
        ClosedForm::LinearG { c, sigma } => {
            let prod: f64 = db_tail.iter().map(|b| 1.0 + c * b).product();
            (x * prod, if terminal { 0.0 } else { sigma * prod })
        }
        ClosedForm::QuadraticTerminal { sigma } => (
            x * x + sigma * sigma * remaining as f64 * h,
            if terminal { 0.0 } else { 2.0 * sigma * x },
        ),
    })
}

/// Exact discrete solution on every path of a batch.
pub fn closed_form_discrete(cf: &ClosedForm, batch: &PathBatch, grid: &TimeGrid) -> Result<PathwiseSolution> {
    let n = grid.n_steps;
    if batch.n_steps != n {
        return Err(Error::Dimension(format!("batch has N = {}, grid N = {n}", batch.n_steps)));
    }
    let mut out = PathwiseSolution::zeros(batch.n_paths, n);
    for m in 0..batch.n_paths {
        let db = batch.db_row(m);
        for k in 0..=n {
            let (y, z) = closed_form_value(cf, grid, k, batch.x(m, k), &db[k..])?;
            out.set(m, k, y, z);
        }
    }
    Ok(out)
}

/// Gauss–Hermite rule for `E φ(ξ)`, `ξ ~ N(0, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub h: f64,
}

impl QuadratureGrid {
    pub fn new(n_nodes: usize, h: f64) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::config("quadrature needs at least 2 nodes"));
        }
        let rule = GaussHermite::new(n_nodes).map_err(|e| Error::Numerical(e.to_string()))?;
        let scale = (2.0 * h).sqrt();
        let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0 * scale).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
            h,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// A point of the tensor grid at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorState {
    /// `ΔW_1..ΔW_k`.
    pub dw: Vec<f64>,
    /// `ΔB_k..ΔB_{N−1}`.
    pub db_tail: Vec<f64>,
    pub x: f64,
}

/// The discrete scheme solved on the Gauss–Hermite tensor grid.
///
/// A state at step `k` carries `N` digits: digits `0..k` index `ΔW_1..ΔW_k`,
/// digits `k..N` index `ΔB_k..ΔB_{N−1}`. Moving to step `k+1` replaces digit
/// `k` by the node of `ΔW_{k+1}`.
pub struct QuadratureScheme {
    spec: ProblemSpec,
    pub n_steps: usize,
    pub h: f64,
    pub grid: QuadratureGrid,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

/// Largest `N` accepted by [`quadrature_scheme`].
pub const QUADRATURE_MAX_STEPS: usize = 3;

fn implicit_step(spec: &ProblemSpec, x: f64, explicit: f64, z: f64, h: f64) -> Result<f64> {
    let mut y = explicit;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = explicit + h * spec.f(x, y, z);
        if !next.is_finite() {
            return Err(Error::Numerical("implicit step produced a non-finite value".into()));
        }
        if (next - y).abs() <= FIXED_POINT_TOL * y.abs().max(1.0) {
            return Ok(next);
        }
        y = next;
    }
    Err(Error::Numerical(format!(
        "implicit step did not converge in {FIXED_POINT_MAX_ITER} iterations"
    )))
}

/// Solves the discrete scheme with `n_nodes` Gauss–Hermite nodes per axis.
pub fn quadrature_scheme(spec: &ProblemSpec, grid: &TimeGrid, n_nodes: usize) -> Result<QuadratureScheme> {
    let n = grid.n_steps;
    if n > QUADRATURE_MAX_STEPS {
        return Err(Error::config(format!(
            "quadrature oracle supports N <= {QUADRATURE_MAX_STEPS}, got {n}"
        )));
    }
    let h = grid.h;
    if h * h * spec.lipschitz_f >= 1.0 {
        return Err(Error::config("h²·L_f >= 1: implicit step is not contractive"));
    }
    let q = QuadratureGrid::new(n_nodes, h)?;
    let nq = q.len();
    let n_states = nq.pow(n as u32);
    let digit = |s: usize, j: usize| (s / nq.pow((n - 1 - j) as u32)) % nq;
    let place = |j: usize| nq.pow((n - 1 - j) as u32);

    // X_k on each state (depends on the first k digits only)
    let mut x = vec![vec![spec.x0; n_states]];
    for k in 1..=n {
        let prev = &x[k - 1];
        let xs = (0..n_states)
            .map(|s| {
                let xp = prev[s];
                xp + h * spec.b(xp) + spec.sigma(xp) * q.nodes[digit(s, k - 1)]
            })
            .collect();
        x.push(xs);
    }

    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    y[n] = x[n].iter().map(|&v| spec.phi(v)).collect();
    z[n] = vec![0.0; n_states];
    for k in (0..n).rev() {
        let mut yk = vec![0.0; n_states];
        let mut zk = vec![0.0; n_states];
        for s in 0..n_states {
            let db = q.nodes[digit(s, k)];
            let base = s - digit(s, k) * place(k);
            let (mut ey, mut eyw, mut eg, mut egw) = (0.0, 0.0, 0.0, 0.0);
            for (j, (&w, &dw)) in q.weights.iter().zip(&q.nodes).enumerate() {
                let s1 = base + j * place(k);
                let y1 = y[k + 1][s1];
                let g1 = spec.g(x[k + 1][s1], y1);
                ey += w * y1;
                eyw += w * y1 * dw;
                eg += w * g1;
                egw += w * g1 * dw;
            }
            let zv = (eyw + db * egw) / h;
            yk[s] = implicit_step(spec, x[k][s], ey + db * eg, zv, h)?;
            zk[s] = zv;
        }
        y[k] = yk;
        z[k] = zk;
    }
    Ok(QuadratureScheme {
        spec: spec.clone(),
        n_steps: n,
        h,
        grid: q,
        x,
        y,
        z,
    })
}

impl QuadratureScheme {
    pub fn n_states(&self) -> usize {
        self.y[0].len()
    }

    pub fn state(&self, k: usize, s: usize) -> TensorState {
        let nq = self.grid.len();
        let n = self.n_steps;
        let digits: Vec<usize> = (0..n).map(|j| (s / nq.pow((n - 1 - j) as u32)) % nq).collect();
        TensorState {
            dw: digits[..k].iter().map(|&d| self.grid.nodes[d]).collect(),
            db_tail: digits[k..].iter().map(|&d| self.grid.nodes[d]).collect(),
            x: self.x[k][s],
        }
    }

    pub fn y(&self, k: usize, s: usize) -> f64 {
        self.y[k][s]
    }

    pub fn z(&self, k: usize, s: usize) -> f64 {
        self.z[k][s]
    }

    /// `Y_0` (identical on every state).
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    /// `(Y_k, Z_k)` at an arbitrary `ΔW` history (`k = dw.len()`) and
    /// `ΔB` tail, by recursive quadrature.
    pub fn evaluate(&self, dw: &[f64], db_tail: &[f64]) -> Result<(f64, f64)> {
        let k = dw.len();
        if k + db_tail.len() != self.n_steps {
            return Err(Error::Dimension(format!(
                "history of {k} and tail of {} do not make N = {}",
                db_tail.len(),
                self.n_steps
            )));
        }
        let mut x = self.spec.x0;
        for &w in dw {
            x += self.h * self.spec.b(x) + self.spec.sigma(x) * w;
        }
        self.evaluate_at(k, x, db_tail)
    }

    /// `(Y_k, Z_k)` given `X_k` directly.
    pub fn evaluate_at(&self, k: usize, x: f64, db_tail: &[f64]) -> Result<(f64, f64)> {
        let spec = &self.spec;
        if k == self.n_steps {
            return Ok((spec.phi(x), 0.0));
        }
        let h = self.h;
        let db = db_tail[0];
        let (mut ey, mut eyw, mut eg, mut egw) = (0.0, 0.0, 0.0, 0.0);
        for (&w, &dw) in self.grid.weights.iter().zip(&self.grid.nodes) {
            let x1 = x + h * spec.b(x) + spec.sigma(x) * dw;
            let (y1, _) = self.evaluate_at(k + 1, x1, &db_tail[1..])?;
            let g1 = spec.g(x1, y1);
            ey += w * y1;
            eyw += w * y1 * dw;
            eg += w * g1;
            egw += w * g1 * dw;
        }
        let zv = (eyw + db * egw) / h;
        Ok((implicit_step(spec, x, ey + db * eg, zv, h)?, zv))
    }

    /// Evaluates on every path of a batch.
    pub fn evaluate_paths(&self, batch: &PathBatch) -> Result<PathwiseSolution> {
        let n = self.n_steps;
        let mut out = PathwiseSolution::zeros(batch.n_paths, n);
        for m in 0..batch.n_paths {
            let db = batch.db_row(m);
            for k in 0..=n {
                let (y, z) = self.evaluate_at(k, batch.x(m, k), &db[k..])?;
                out.set(m, k, y, z);
            }
        }
        Ok(out)
    }
}

/// Nodes and weights for `E φ(ξ)`, `ξ ~ N(0, var)`: Gauss–Legendre on pieces
/// of at most 1.5 standard deviations over `±8.5` sd, split at `breaks`.
#[derive(Debug, Clone)]
pub struct GaussianRule {
    legendre: Vec<(f64, f64)>,
}

const TAIL_SD: f64 = 8.5;
const PIECE_SD: f64 = 1.5;

impl GaussianRule {
    pub fn new(order: usize) -> Result<Self> {
        let rule = GaussLegendre::new(order).map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(Self {
            legendre: rule.as_node_weight_pairs().to_vec(),
        })
    }

    /// Appends `(node, weight)` pairs; weights include the Gaussian density.
    pub fn nodes(&self, var: f64, breaks: &[f64], out: &mut Vec<(f64, f64)>) {
        out.clear();
        if var == 0.0 {
            out.push((0.0, 1.0));
            return;
        }
        let sd = var.sqrt();
        let lim = TAIL_SD * sd;
        let n_base = (2.0 * TAIL_SD / PIECE_SD).ceil() as usize;
        let mut cuts: Vec<f64> = (0..=n_base)
            .map(|i| -lim + 2.0 * lim * i as f64 / n_base as f64)
            .collect();
        cuts.extend(breaks.iter().copied().filter(|b| b.abs() < lim));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            if half <= 0.0 {
                continue;
            }
            for &(t, wt) in &self.legendre {
                let x = mid + half * t;
                out.push((x, wt * half * norm * (-0.5 * x * x / var).exp()));
            }
        }
    }
}

/// Finite interior edges of a partition.
fn interior_edges(edges: &[f64]) -> Vec<f64> {
    edges.iter().copied().filter(|e| e.is_finite()).collect()
}

/// Exact probabilities of the state cells at step `k` under the Euler chain,
/// integrating `ΔW_1..ΔW_{k−1}` numerically and the last step through the
/// normal distribution function. Supports `k <= 4`.
pub fn exact_state_probs(spec: &ProblemSpec, grid: &TimeGrid, edges: &[f64], k: usize) -> Result<Vec<f64>> {
    let cells = edges.len() - 1;
    if k == 0 {
        let mut probs = vec![0.0; cells];
        let i = edges[1..cells].partition_point(|&e| e <= spec.x0);
        probs[i] = 1.0;
        return Ok(probs);
    }
    if k > 4 {
        return Err(Error::config("exact state probabilities are limited to k <= 4"));
    }
    let std = Normal::new(0.0, 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let rule = GaussianRule::new(10)?;
    let h = grid.h;
    let mut probs = vec![0.0; cells];
    let add_last = |x: f64, w: f64, probs: &mut Vec<f64>| {
        let mean = x + h * spec.b(x);
        let s = spec.sigma(x).abs() * h.sqrt();
        for i in 0..cells {
            let (lo, hi) = (edges[i], edges[i + 1]);
            let p = if s == 0.0 {
                f64::from(lo <= mean && mean < hi)
            } else {
                std.cdf((hi - mean) / s) - std.cdf((lo - mean) / s)
            };
            probs[i] += w * p;
        }
    };
    // nested over ΔW_1..ΔW_{k−1}
    fn walk(
        depth: usize,
        x: f64,
        w: f64,
        spec: &ProblemSpec,
        h: f64,
        rule: &GaussianRule,
        last: &mut dyn FnMut(f64, f64),
    ) {
        if depth == 0 {
            last(x, w);
            return;
        }
        let mut nodes = Vec::new();
        rule.nodes(h, &[], &mut nodes);
        let drift = x + h * spec.b(x);
        let sig = spec.sigma(x);
        for (dw, wt) in nodes {
            walk(depth - 1, drift + sig * dw, w * wt, spec, h, rule, last);
        }
    }
    walk(k - 1, spec.x0, 1.0, spec, h, &rule, &mut |x, w| add_last(x, w, &mut probs));
    Ok(probs)
}

/// The basis with every state partition re-normalized by its exact cell
/// probabilities.
pub fn exact_basis(spec: &ProblemSpec, grid: &TimeGrid, basis: &BasisSystem) -> Result<BasisSystem> {
    let mut out = basis.clone();
    for k in 0..=grid.n_steps {
        let probs = exact_state_probs(spec, grid, &basis.partitions.state[k].edges, k)?;
        out = out.with_state_probs(k, &probs)?;
    }
    Ok(out)
}

/// Coefficients of the `M = ∞` scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealProjection {
    /// After exactly `I` Picard passes at every step.
    pub iterated: ThetaCoefficients,
    /// Picard fixed point at each step `k`, with the iterated coefficients
    /// used at the later steps.
    pub fixed_point: ThetaCoefficients,
    /// Passes needed to reach the fixed point, per `k < N`.
    pub fixed_point_iterations: Vec<usize>,
}

/// Largest `N` and `L` accepted by [`ideal_projection_theta`].
pub const IDEAL_MAX_STEPS: usize = 2;
pub const IDEAL_MAX_CELLS: usize = 3;

/// Sparse sample of `v_k` (or `p_N`) with its weight and target parts.
struct Point {
    weight: f64,
    x_k: f64,
    base: f64,
    idx: Vec<u32>,
    val: Vec<f64>,
}

struct Moments {
    points: Vec<Point>,
    dim: usize,
}

impl Moments {
    fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for pt in &self.points {
            for (a, &i) in pt.idx.iter().enumerate() {
                for (b, &j) in pt.idx.iter().enumerate() {
                    g[(i as usize, j as usize)] += pt.weight * pt.val[a] * pt.val[b];
                }
            }
        }
        g
    }

    fn moment(&self, target: impl Fn(&Point) -> f64) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim);
        for pt in &self.points {
            let t = pt.weight * target(pt);
            for (&i, &v) in pt.idx.iter().zip(&pt.val) {
                r[i as usize] += t * v;
            }
        }
        r
    }
}

fn dot_sparse(idx: &[u32], val: &[f64], coef: &[f64], len: usize) -> f64 {
    idx.iter()
        .zip(val)
        .filter(|(&i, _)| (i as usize) < len)
        .map(|(&i, &v)| coef[i as usize] * v)
        .sum()
}

/// Quadrature points for step `k`: axes `ΔW_1..ΔW_{k+1}` (only up to `ΔW_N`)
/// followed by `ΔB_k..ΔB_{N−1}`.
fn step_points(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &BasisSystem,
    rule: &GaussianRule,
    k: usize,
    alpha_next: Option<&[f64]>,
) -> Moments {
    let n = grid.n_steps;
    let h = grid.h;
    let sqrt_h = h.sqrt();
    let n_w = (k + 1).min(n);
    let n_b = n - k;
    let inc_breaks = interior_edges(&basis.partitions.increments.edges);
    let mut points = Vec::new();

    // enumerate W-paths first, then the B tail on each
    let mut w_paths: Vec<(Vec<f64>, Vec<f64>, f64)> = vec![(Vec::new(), vec![spec.x0], 1.0)];
    let mut nodes = Vec::new();
    for j in 1..=n_w {
        let mut next = Vec::new();
        for (dws, xs, w) in &w_paths {
            let xp = *xs.last().unwrap();
            let drift = xp + h * spec.b(xp);
            let sig = spec.sigma(xp);
            let breaks: Vec<f64> = if sig == 0.0 {
                Vec::new()
            } else {
                interior_edges(&basis.partitions.state[j].edges)
                    .iter()
                    .map(|e| (e - drift) / sig)
                    .collect()
            };
            rule.nodes(h, &breaks, &mut nodes);
            for &(dw, wt) in &nodes {
                let mut d = dws.clone();
                d.push(dw);
                let mut x = xs.clone();
                x.push(drift + sig * dw);
                next.push((d, x, w * wt));
            }
        }
        w_paths = next;
    }
    let mut b_tails: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..n_b {
        rule.nodes(h, &inc_breaks, &mut nodes);
        b_tails = b_tails
            .iter()
            .flat_map(|(t, w)| {
                nodes.iter().map(move |&(b, wt)| {
                    let mut t = t.clone();
                    t.push(b);
                    (t, w * wt)
                })
            })
            .collect();
    }

    let dim = basis.dim(k);
    let mut idx = Vec::new();
    let mut val = Vec::new();
    for (dws, xs, ww) in &w_paths {
        for (tail, wb) in &b_tails {
            idx.clear();
            val.clear();
            basis.eval_p_into(k, xs[k], tail, &mut idx, &mut val);
            let weight = ww * wb;
            if k == n {
                points.push(Point {
                    weight,
                    x_k: xs[k],
                    base: spec.phi(xs[k]),
                    idx: idx.clone(),
                    val: val.clone(),
                });
                continue;
            }
            let x1 = xs[k + 1];
            let mut i1 = Vec::new();
            let mut v1 = Vec::new();
            basis.eval_p_into(k + 1, x1, &tail[1..], &mut i1, &mut v1);
            let alpha_next = alpha_next.expect("later coefficients");
            let y1 = dot_sparse(&i1, &v1, alpha_next, alpha_next.len());
            let base = y1 + tail[0] * spec.g(x1, y1);
            let scale = dws[k] / sqrt_h;
            let mut vi = idx.clone();
            let mut vv = val.clone();
            vi.extend(idx.iter().map(|&i| i + dim as u32));
            vv.extend(val.iter().map(|&v| v * scale));
            points.push(Point {
                weight,
                x_k: xs[k],
                base,
                idx: vi,
                val: vv,
            });
        }
    }
    Moments {
        points,
        dim: if k == n { dim } else { 2 * dim },
    }
}

fn spd_solver(g: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    g.cholesky()
        .ok_or_else(|| Error::Numerical("ideal Gram matrix is not positive definite".into()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Coefficients `θ_k = G_k^{-1} E[v_k x_k]` of the scheme with exact
/// expectations, `G_k = E[v_k v_k^*]`. Uses `iterations` Picard passes in the
/// `iterated` coefficients, like the Monte-Carlo solver; no truncation.
pub fn ideal_projection_theta(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    basis: &BasisSystem,
    iterations: usize,
    picard_beta: PicardBeta,
) -> Result<IdealProjection> {
    let n = grid.n_steps;
    if n > IDEAL_MAX_STEPS || basis.cells > IDEAL_MAX_CELLS {
        return Err(Error::config(format!(
            "ideal projection supports N <= {IDEAL_MAX_STEPS} and L <= {IDEAL_MAX_CELLS}"
        )));
    }
    if basis.depth_cap < n {
        return Err(Error::config("ideal projection needs the full-depth basis"));
    }
    if basis.n_steps != n {
        return Err(Error::BasisMismatch("basis and grid disagree on N".into()));
    }
    if iterations == 0 {
        return Err(Error::config("number of Picard iterations I must be >= 1"));
    }
    let h = grid.h;
    if h * h * spec.lipschitz_f >= 1.0 {
        return Err(Error::config("h²·L_f >= 1: implicit step is not contractive"));
    }
    let sqrt_h = h.sqrt();
    let rule = GaussianRule::new(8)?;

    let mut alpha = vec![Vec::new(); n + 1];
    let mut beta = vec![Vec::new(); n + 1];
    let mut alpha_fp = vec![Vec::new(); n + 1];
    let mut beta_fp = vec![Vec::new(); n + 1];
    let mut fp_iters = vec![0; n];

    let terminal = step_points(spec, grid, basis, &rule, n, None);
    let chol = spd_solver(terminal.gram())?;
    let a_n = chol.solve(&terminal.moment(|p| p.base)).as_slice().to_vec();
    alpha[n] = a_n.clone();
    alpha_fp[n] = a_n;
    beta[n] = vec![0.0; basis.dim(n)];
    beta_fp[n] = beta[n].clone();

    for k in (0..n).rev() {
        let d = basis.dim(k);
        let pts = step_points(spec, grid, basis, &rule, k, Some(&alpha[k + 1]));
        let chol = spd_solver(pts.gram())?;
        let frozen: Option<Vec<f64>> = match picard_beta {
            PicardBeta::Refit => None,
            PicardBeta::Freeze => Some(chol.solve(&pts.moment(|p| p.base)).as_slice()[d..].to_vec()),
        };
        let pass = |theta: &[f64]| -> Vec<f64> {
            let (a, sb) = theta.split_at(d);
            let sb = frozen.as_deref().unwrap_or(sb);
            let rhs = pts.moment(|p| {
                let y = dot_sparse(&p.idx, &p.val, a, d);
                let z = dot_sparse(&p.idx, &p.val, sb, d) / sqrt_h;
                p.base + h * spec.f(p.x_k, y, z)
            });
            let mut next = chol.solve(&rhs).as_slice().to_vec();
            if let Some(fb) = &frozen {
                next[d..].copy_from_slice(fb);
            }
            next
        };
        let mut theta = vec![0.0; 2 * d];
        let mut iterated = None;
        let mut converged = false;
        for i in 1..=FIXED_POINT_MAX_ITER.max(iterations) {
            let next = pass(&theta);
            let step = sq_dist(&next, &theta).sqrt();
            let scale = next.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            theta = next;
            if i == iterations {
                iterated = Some(theta.clone());
            }
            if !converged && step <= FIXED_POINT_TOL * scale {
                fp_iters[k] = i;
                converged = true;
            }
            if converged && iterated.is_some() {
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "ideal Picard iteration did not converge at step {k}"
            )));
        }
        let iterated = iterated.expect("iterations <= loop bound");
        alpha[k] = iterated[..d].to_vec();
        beta[k] = iterated[d..].iter().map(|b| b / sqrt_h).collect();
        alpha_fp[k] = theta[..d].to_vec();
        beta_fp[k] = theta[d..].iter().map(|b| b / sqrt_h).collect();
    }
    Ok(IdealProjection {
        iterated: ThetaCoefficients { alpha, beta },
        fixed_point: ThetaCoefficients {
            alpha: alpha_fp,
            beta: beta_fp,
        },
        fixed_point_iterations: fp_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{assemble_basis, build_partitions, DEFAULT_HARD_CAP};
    use crate::grid_paths::{build_time_grid, simulate_paths};
    use crate::model::{make_builtin_case, CaseParams, CaseTag};
    use std::sync::Arc;

    fn case(tag: CaseTag) -> (ProblemSpec, ClosedForm) {
        make_builtin_case(tag, CaseParams::default()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let (spec, cf) = case(CaseTag::LinearF);
        let grid = build_time_grid(1.0, 4).unwrap();
        let (y0, z0) = closed_form_value(&cf, &grid, 0, 1.0, &[0.0; 4]).unwrap();
        assert!((y0 - 0.875f64.powi(-4)).abs() < 1e-14);
        assert!((y0 - 1.705956).abs() < 1e-6);
        assert!((z0 - 0.875f64.powi(-3)).abs() < 1e-14);

        let (_, cf) = case(CaseTag::Martingale);
        let batch = simulate_paths(&spec, &grid, 50, 3).unwrap();
        let sol = closed_form_discrete(&cf, &batch, &grid).unwrap();
        for m in 0..50 {
            assert_eq!(sol.y(m, 0), 1.0);
        }

        let (_, cf) = case(CaseTag::LinearG);
        assert_eq!(closed_form_value(&cf, &grid, 1, 0.3, &[0.0; 3]).unwrap().0, 0.3);

        let bad = ClosedForm::LinearF { a: 4.0, sigma: 1.0 };
        assert!(closed_form_value(&bad, &grid, 0, 1.0, &[0.0; 4]).is_err());
    }

    #[test]
    fn hermite_grid_moments() {
        let q = QuadratureGrid::new(12, 0.25).unwrap();
        let s: f64 = q.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let m2: f64 = q.weights.iter().zip(&q.nodes).map(|(w, x)| w * x * x).sum();
        assert!((m2 - 0.25).abs() < 1e-10);
        let m4: f64 = q.weights.iter().zip(&q.nodes).map(|(w, x)| w * x.powi(4)).sum();
        assert!((m4 - 3.0 * 0.0625).abs() < 1e-10);
    }

    #[test]
    fn quadrature_quadratic_terminal() {
        let params = CaseParams {
            x0: 0.0,
            ..Default::default()
        };
        let (spec, _) = make_builtin_case(CaseTag::QuadraticTerminal, params).unwrap();
        let grid = build_time_grid(1.0, 1).unwrap();
        let q = quadrature_scheme(&spec, &grid, 20).unwrap();
        assert!((q.y0() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_martingale_is_exact() {
        let (spec, _) = case(CaseTag::Martingale);
        let grid = build_time_grid(1.0, 3).unwrap();
        let q = quadrature_scheme(&spec, &grid, 6).unwrap();
        for s in 0..q.n_states() {
            assert!((q.y(0, s) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        for tag in [CaseTag::Martingale, CaseTag::LinearF, CaseTag::ConstantG, CaseTag::LinearG] {
            let (spec, cf) = case(tag);
            let grid = build_time_grid(1.0, 2).unwrap();
            let q = quadrature_scheme(&spec, &grid, 8).unwrap();
            for k in 0..=2 {
                for s in 0..q.n_states() {
                    let st = q.state(k, s);
                    let (y, z) = closed_form_value(&cf, &grid, k, st.x, &st.db_tail).unwrap();
                    assert!((q.y(k, s) - y).abs() < 1e-9, "{tag:?} k={k}");
                    assert!((q.z(k, s) - z).abs() < 1e-9, "{tag:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn quadrature_evaluator_agrees_with_grid() {
        let (spec, _) = case(CaseTag::LinearG);
        let grid = build_time_grid(1.0, 2).unwrap();
        let q = quadrature_scheme(&spec, &grid, 7).unwrap();
        for s in (0..q.n_states()).step_by(5) {
            let st = q.state(1, s);
            let (y, z) = q.evaluate(&st.dw, &st.db_tail).unwrap();
            assert!((y - q.y(1, s)).abs() < 1e-13);
            assert!((z - q.z(1, s)).abs() < 1e-13);
        }
        assert!(q.evaluate(&[0.1], &[]).is_err());
    }

    #[test]
    fn quadrature_node_doubling_is_stable() {
        let mut spec = case(CaseTag::LinearF).0;
        spec.terminal = Arc::new(|x: f64| x.sin());
        let grid = build_time_grid(1.0, 2).unwrap();
        let a = quadrature_scheme(&spec, &grid, 16).unwrap().y0();
        let b = quadrature_scheme(&spec, &grid, 32).unwrap().y0();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn quadrature_rejects_large_n() {
        let (spec, _) = case(CaseTag::Martingale);
        let grid = build_time_grid(1.0, 4).unwrap();
        assert!(quadrature_scheme(&spec, &grid, 4).is_err());
    }

    #[test]
    fn gaussian_rule_integrates_moments_and_indicators() {
        let rule = GaussianRule::new(8).unwrap();
        let mut nodes = Vec::new();
        rule.nodes(0.5, &[0.3], &mut nodes);
        let total: f64 = nodes.iter().map(|p| p.1).sum();
        let m2: f64 = nodes.iter().map(|p| p.1 * p.0 * p.0).sum();
        let tail: f64 = nodes.iter().filter(|p| p.0 >= 0.3).map(|p| p.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((m2 - 0.5).abs() < 1e-12);
        let exact = 1.0 - Normal::new(0.0, 0.5f64.sqrt()).unwrap().cdf(0.3);
        assert!((tail - exact).abs() < 1e-12);
    }

    #[test]
    fn exact_probs_match_gaussian_law() {
        let (spec, _) = case(CaseTag::Martingale);
        let grid = build_time_grid(1.0, 4).unwrap();
        let edges = [f64::NEG_INFINITY, 0.5, 1.2, f64::INFINITY];
        let law = Normal::new(1.0, 0.75f64.sqrt()).unwrap();
        let probs = exact_state_probs(&spec, &grid, &edges, 3).unwrap();
        let expected = [law.cdf(0.5), law.cdf(1.2) - law.cdf(0.5), 1.0 - law.cdf(1.2)];
        for (p, e) in probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-10, "{p} vs {e}");
        }
        assert_eq!(exact_state_probs(&spec, &grid, &edges, 0).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    fn ideal_fixture(tag: CaseTag, n: usize, cells: usize) -> (ProblemSpec, TimeGrid, BasisSystem) {
        let (spec, _) = case(tag);
        let grid = build_time_grid(1.0, n).unwrap();
        let parts = build_partitions(&spec, &grid, cells, 5000, 9).unwrap();
        let basis = assemble_basis(parts, &grid, None, DEFAULT_HARD_CAP).unwrap();
        (spec, grid, basis)
    }

    #[test]
    fn ideal_zero_problem() {
        let (mut spec, grid, basis) = ideal_fixture(CaseTag::Martingale, 2, 2);
        spec.terminal = Arc::new(|_| 0.0);
        let ip = ideal_projection_theta(&spec, &grid, &basis, 2, PicardBeta::Refit).unwrap();
        for k in 0..=2 {
            assert!(ip.fixed_point.alpha[k].iter().all(|a| a.abs() < 1e-15));
            assert!(ip.fixed_point.beta[k].iter().all(|a| a.abs() < 1e-15));
        }
    }

    #[test]
    fn ideal_without_driver_is_one_pass() {
        let (spec, grid, basis) = ideal_fixture(CaseTag::LinearG, 2, 2);
        let ip = ideal_projection_theta(&spec, &grid, &basis, 1, PicardBeta::Refit).unwrap();
        assert!(ip.fixed_point_iterations.iter().all(|&i| i <= 2));
        assert_eq!(ip.iterated, ip.fixed_point);
    }

    #[test]
    fn ideal_martingale_single_cell() {
        let (spec, grid, basis) = ideal_fixture(CaseTag::Martingale, 1, 1);
        let ip = ideal_projection_theta(&spec, &grid, &basis, 1, PicardBeta::Refit).unwrap();
        // single terminal cell: Y_1 = E X_1 = x0, so α_0 = (x0, 0) and β_0 = 0
        let norm = basis.partitions.state[1].norm[0];
        assert!((ip.fixed_point.alpha[1][0] * norm - 1.0).abs() < 1e-12);
        assert!((ip.fixed_point.alpha[0][0] - 1.0).abs() < 1e-12);
        assert!(ip.fixed_point.alpha[0][1].abs() < 1e-12);
        assert!(ip.fixed_point.beta[0].iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn ideal_linear_f_matches_large_sample_regression() {
        let (spec, grid, basis) = ideal_fixture(CaseTag::LinearF, 1, 3);
        let ip = ideal_projection_theta(&spec, &grid, &basis, 3, PicardBeta::Refit).unwrap();
        assert!(ip.fixed_point_iterations[0] > 3);
        // α_0 · p_0 at x0 with ΔB = 0 vs the closed form restricted to cell means
        let batch = simulate_paths(&spec, &grid, 200_000, 5).unwrap();
        let r = crate::solver::backward_solve(
            &spec,
            &grid,
            &basis,
            &batch,
            &crate::solver::SolverOptions {
                iterations: 3,
                ..Default::default()
            },
            &crate::solver::TruncationProfile::disabled(),
        )
        .unwrap();
        let d = sq_dist(&r.theta.alpha[0], &ip.iterated.alpha[0]).sqrt();
        assert!(d < 0.01, "distance {d}");
    }
}
