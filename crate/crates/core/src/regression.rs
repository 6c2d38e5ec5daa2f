//! Empirical least squares on sparse designs: Gram matrices, the regression
//! solve and the localization diagnostics.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::basis::SampleBasis;
use crate::error::{Error, Result};

/// Samples per accumulation chunk. Chunking depends only on `M`, so sums are
/// reproducible for any worker count.
const MIN_CHUNK: usize = 2048;
const MAX_CHUNKS: usize = 16;
/// Relative eigenvalue threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-12;

fn chunk_len(m: usize) -> usize {
    MIN_CHUNK.max(m.div_ceil(MAX_CHUNKS))
}

impl SampleBasis {
    /// Dense rows as a sparse design (every entry stored).
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("rows of unequal length".into()));
        }
        Ok(Self {
            dim,
            stride: dim,
            idx: rows.iter().flat_map(|_| 0..dim as u32).collect(),
            val: rows.iter().flatten().copied().collect(),
        })
    }

    /// `v^m = (p^m, p^m · ΔW^m/√h)` for every sample, given the scaled
    /// increments `ΔW^m/√h`.
    pub fn with_increment_copy(&self, scaled_dw: &[f64]) -> Result<Self> {
        let n = self.n_samples();
        if scaled_dw.len() != n {
            return Err(Error::Dimension(format!(
                "{} increments for {n} samples",
                scaled_dw.len()
            )));
        }
        let stride = 2 * self.stride;
        let mut idx = Vec::with_capacity(n * stride);
        let mut val = Vec::with_capacity(n * stride);
        for (m, &w) in scaled_dw.iter().enumerate() {
            let (pi, pv) = self.entries(m);
            idx.extend_from_slice(pi);
            val.extend_from_slice(pv);
            idx.extend(pi.iter().map(|&i| i + self.dim as u32));
            val.extend(pv.iter().map(|&v| v * w));
        }
        Ok(Self {
            dim: 2 * self.dim,
            stride,
            idx,
            val,
        })
    }
}

/// `V = (1/M) Σ v v*` and its leading `D × D` block `P = (1/M) Σ p p*`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramPair {
    pub v: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// `(1/M) Σ_m s^m (s^m)*` for a sparse design.
pub fn gram(design: &SampleBasis) -> DMatrix<f64> {
    let n = design.dim;
    let m = design.n_samples();
    if m == 0 {
        return DMatrix::zeros(n, n);
    }
    let chunk = chunk_len(m);
    let partials: Vec<DMatrix<f64>> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc = DMatrix::<f64>::zeros(n, n);
            for s in c * chunk..((c + 1) * chunk).min(m) {
                let (idx, val) = design.entries(s);
                for a in 0..idx.len() {
                    let (ia, va) = (idx[a] as usize, val[a]);
                    acc[(ia, ia)] += va * va;
                    for b in a + 1..idx.len() {
                        let (ib, vb) = (idx[b] as usize, val[b]);
                        let (lo, hi) = if ia <= ib { (ia, ib) } else { (ib, ia) };
                        let w = va * vb;
                        acc[(lo, hi)] += if lo == hi { 2.0 * w } else { w };
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = partials.into_iter().reduce(|a, b| a + b).unwrap();
    total /= m as f64;
    for j in 0..n {
        for i in j + 1..n {
            total[(i, j)] = total[(j, i)];
        }
    }
    total
}

/// Gram pair for the `v` design whose first half of coordinates is `p`.
pub fn gram_matrices(v_design: &SampleBasis) -> Result<GramPair> {
    if v_design.dim % 2 != 0 {
        return Err(Error::Dimension(format!(
            "v design has odd dimension {}",
            v_design.dim
        )));
    }
    let v = gram(v_design);
    let d = v_design.dim / 2;
    let p = v.view((0, 0), (d, d)).into_owned();
    Ok(GramPair { v, p })
}

/// `(1/M) Σ_m x^m s^m`.
pub fn moment(design: &SampleBasis, targets: &[f64]) -> Result<DVector<f64>> {
    let m = design.n_samples();
    if targets.len() != m {
        return Err(Error::Dimension(format!("{} targets for {m} samples", targets.len())));
    }
    if let Some(bad) = targets.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteTarget(bad));
    }
    let n = design.dim;
    if m == 0 {
        return Ok(DVector::zeros(n));
    }
    let chunk = chunk_len(m);
    let partials: Vec<Vec<f64>> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; n];
            for s in c * chunk..((c + 1) * chunk).min(m) {
                let (idx, val) = design.entries(s);
                let x = targets[s];
                for (&i, &v) in idx.iter().zip(val) {
                    acc[i as usize] += x * v;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; n];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(DVector::from_iterator(n, total.into_iter().map(|v| v / m as f64)))
}

/// Eigenvalues of a symmetric matrix, ascending. `converged` is false when the
/// QR sweeps hit the iteration cap, in which case `values` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub converged: bool,
}

impl Spectrum {
    pub fn of(a: &DMatrix<f64>) -> Self {
        if a.nrows() == 0 {
            return Self {
                values: Vec::new(),
                converged: true,
            };
        }
        match SymmetricEigen::try_new(a.clone(), f64::EPSILON, 10 * a.nrows()) {
            Some(eig) => {
                let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                values.sort_by(f64::total_cmp);
                Self {
                    values,
                    converged: true,
                }
            }
            None => Self {
                values: Vec::new(),
                converged: false,
            },
        }
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }
}

/// Operator norm `‖A − Id‖` from the spectrum of `A`, or the Frobenius norm
/// (an upper bound) when the eigen-iteration did not converge. The flag tells
/// which one was returned.
fn distance_to_identity(a: &DMatrix<f64>, spectrum: &Spectrum) -> (f64, bool) {
    if spectrum.converged {
        let d = spectrum
            .values
            .iter()
            .map(|l| (l - 1.0).abs())
            .fold(0.0, f64::max);
        (d, false)
    } else {
        let n = a.nrows();
        ((a - DMatrix::<f64>::identity(n, n)).norm(), true)
    }
}

/// Localization diagnostics of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub norm_v: f64,
    pub norm_p: f64,
    pub lambda_min: f64,
    pub event_ok: bool,
    /// Norms are Frobenius upper bounds rather than operator norms.
    pub bounded: bool,
}

pub fn localization_check(gram: &GramPair, h: f64) -> LocalizationReport {
    localization_from_spectra(gram, &Spectrum::of(&gram.v), &Spectrum::of(&gram.p), h)
}

pub fn localization_from_spectra(gram: &GramPair, spec_v: &Spectrum, spec_p: &Spectrum, h: f64) -> LocalizationReport {
    let (norm_v, bv) = distance_to_identity(&gram.v, spec_v);
    let (norm_p, bp) = distance_to_identity(&gram.p, spec_p);
    LocalizationReport {
        norm_v,
        norm_p,
        lambda_min: spec_v.min(),
        event_ok: norm_v <= h && norm_p <= h,
        bounded: bv || bp,
    }
}

enum Factor {
    Cholesky(Cholesky<f64, nalgebra::Dyn>),
    Pseudo {
        vectors: DMatrix<f64>,
        inv_values: DVector<f64>,
    },
}

/// Factorization of a Gram matrix that returns the minimum-norm minimizer.
/// Full-rank systems (smallest eigenvalue above `RANK_TOL · λ_max`) go
/// through Cholesky; rank-deficient ones through the eigen pseudo-inverse.
pub struct LeastSquaresFactor {
    factor: Factor,
    pub rank: usize,
    pub dim: usize,
}

impl LeastSquaresFactor {
    pub fn new(v: &DMatrix<f64>, spectrum: &Spectrum) -> Result<Self> {
        let dim = v.nrows();
        let lmax = spectrum.max().max(0.0);
        if spectrum.converged && dim > 0 && spectrum.min() > RANK_TOL * lmax {
            if let Some(ch) = Cholesky::new(v.clone()) {
                return Ok(Self {
                    factor: Factor::Cholesky(ch),
                    rank: dim,
                    dim,
                });
            }
        }
        Self::pseudo(v)
    }

    fn pseudo(v: &DMatrix<f64>) -> Result<Self> {
        let dim = v.nrows();
        let eig = SymmetricEigen::try_new(v.clone(), f64::EPSILON, 100 * dim.max(1))
            .ok_or_else(|| Error::Numerical("symmetric eigen-decomposition did not converge".into()))?;
        let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let cut = RANK_TOL * lmax;
        let mut rank = 0;
        let inv_values = eig.eigenvalues.map(|l| {
            if l > cut && l > 0.0 {
                rank += 1;
                1.0 / l
            } else {
                0.0
            }
        });
        Ok(Self {
            factor: Factor::Pseudo {
                vectors: eig.eigenvectors,
                inv_values,
            },
            rank,
            dim,
        })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Cholesky(ch) => ch.solve(rhs),
            Factor::Pseudo { vectors, inv_values } => {
                let coords = vectors.tr_mul(rhs).component_mul(inv_values);
                vectors * coords
            }
        }
    }
}

/// Solution of one regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub theta: DVector<f64>,
    pub lambda_min: f64,
    pub rank: usize,
}

/// `argmin_θ (1/M) Σ_m |x^m − θ·s^m|²`, minimum-norm when the Gram matrix is
/// singular.
pub fn solve_least_squares(design: &SampleBasis, targets: &[f64]) -> Result<LsSolution> {
    let rhs = moment(design, targets)?;
    let v = gram(design);
    let spectrum = Spectrum::of(&v);
    let factor = LeastSquaresFactor::new(&v, &spectrum)?;
    Ok(LsSolution {
        theta: factor.solve(&rhs),
        lambda_min: spectrum.min(),
        rank: factor.rank,
    })
}

/// `|x|²_M = (1/M) Σ_m x_m²`.
pub fn empirical_sq_norm(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Fitted values `θ·s^m` for every sample.
pub fn fitted(design: &SampleBasis, theta: &[f64]) -> Vec<f64> {
    (0..design.n_samples()).map(|m| design.dot(m, theta)).collect()
}
