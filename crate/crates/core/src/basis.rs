//! Indicator bases on the state and on the `B` increments, and the blockwise
//! vectors `p_k` and `v_k = (p_k, p_k ΔW_{k+1}/√h)`.
//!
//! Layout of `p_k` (fixed; coefficient indices are stable across runs):
//!
//! * base block: `u_{i_N}(X_k)` for every state cell `i_N` at step `k`;
//! * then for `l = N−1` down to `k`, the block
//!   `u_{i_N}(X_k) · Π_{r=l+1}^{N−1} v_{i_r}(ΔB_r) · ΔB_l/√h`, indexed by
//!   `(i_N, i_{N−1}, …, i_{l+1})` in mixed radix with `i_N` most significant.
//!
//! Blocks whose product length `N − l` exceeds the depth cap are left out.
//! Each block contributes exactly one (possibly zero) entry per sample, so
//! `p_k` is stored sparsely with a fixed stride equal to the block count.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use log::warn;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid_paths::{derive_seed, simulate_states, TimeGrid};
use crate::model::ProblemSpec;

pub const DEFAULT_HARD_CAP: usize = 20_000;
const PILOT_STREAM_TAG: u64 = 0x5049_4C4F_54;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    State,
    Gaussian,
}

/// A partition of the real line into cells `[edges[i], edges[i+1])` with
/// normalizations `1/√P(cell)`. Outer cells extend to `±∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition1D {
    pub kind: PartitionKind,
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
    pub norm: Vec<f64>,
}

impl Partition1D {
    /// Equal-probability cells for `N(0, h)`: edges at the exact quantiles
    /// `i/L`, probabilities `1/L`, normalization `√L`.
    pub fn gaussian(cells: usize, h: f64) -> Result<Self> {
        if cells == 0 {
            return Err(Error::config("number of cells L must be >= 1"));
        }
        let normal = Normal::new(0.0, h.sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let mut edges = Vec::with_capacity(cells + 1);
        edges.push(f64::NEG_INFINITY);
        for i in 1..cells {
            edges.push(normal.inverse_cdf(i as f64 / cells as f64));
        }
        edges.push(f64::INFINITY);
        let l = cells as f64;
        Ok(Self {
            kind: PartitionKind::Gaussian,
            edges,
            probs: vec![1.0 / l; cells],
            norm: vec![l.sqrt(); cells],
        })
    }

    /// Cells at the empirical `i/L` quantiles of `samples`, probabilities taken
    /// as cell frequencies. Atoms that produce repeated or empty cells are
    /// merged; the second return value tells whether that happened.
    pub fn from_samples(samples: &[f64], cells: usize) -> Result<(Self, bool)> {
        if cells == 0 {
            return Err(Error::config("number of cells L must be >= 1"));
        }
        if samples.is_empty() {
            return Err(Error::config("pilot sample is empty"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let mut interior: Vec<f64> = Vec::with_capacity(cells.saturating_sub(1));
        for i in 1..cells {
            let e = if n == 1 {
                sorted[0]
            } else {
                let j = ((i * n + cells / 2) / cells).clamp(1, n - 1);
                0.5 * (sorted[j - 1] + sorted[j])
            };
            interior.push(e);
        }
        interior.dedup();
        let before = interior.len();

        let counts = |interior: &[f64]| {
            let mut c = vec![0usize; interior.len() + 1];
            for &x in &sorted {
                c[interior.partition_point(|&e| e <= x)] += 1;
            }
            c
        };
        let mut c = counts(&interior);
        while let Some(empty) = c.iter().position(|&v| v == 0) {
            let drop = if empty == 0 { 0 } else { empty - 1 };
            interior.remove(drop);
            c = counts(&interior);
        }
        let collapsed = interior.len() + 1 < cells || interior.len() < before;

        let mut edges = Vec::with_capacity(interior.len() + 2);
        edges.push(f64::NEG_INFINITY);
        edges.extend_from_slice(&interior);
        edges.push(f64::INFINITY);
        let probs: Vec<f64> = c.iter().map(|&v| v as f64 / n as f64).collect();
        let norm = probs.iter().map(|p| 1.0 / p.sqrt()).collect();
        Ok((
            Self {
                kind: PartitionKind::State,
                edges,
                probs,
                norm,
            },
            collapsed,
        ))
    }

    pub fn n_cells(&self) -> usize {
        self.probs.len()
    }

    /// Index of the cell containing `x`.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        let interior = &self.edges[1..self.edges.len() - 1];
        interior.partition_point(|&e| e <= x)
    }

    /// Normalized indicator `u_i(x)`.
    pub fn indicator(&self, i: usize, x: f64) -> f64 {
        if self.cell_of(x) == i {
            self.norm[i]
        } else {
            0.0
        }
    }

    /// Same cells with new probabilities (e.g. exact ones); probabilities must
    /// be positive and are renormalized to sum to one.
    pub fn with_probs(&self, probs: &[f64]) -> Result<Self> {
        if probs.len() != self.n_cells() {
            return Err(Error::Dimension(format!(
                "{} probabilities for {} cells",
                probs.len(),
                self.n_cells()
            )));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::config("cell probabilities must be positive"));
        }
        let total: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let norm = probs.iter().map(|p| 1.0 / p.sqrt()).collect();
        Ok(Self {
            probs,
            norm,
            ..self.clone()
        })
    }
}

/// State partitions for `k = 0..=N` and the partition shared by all
/// `ΔB_k ~ N(0, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitions {
    pub state: Vec<Partition1D>,
    pub increments: Partition1D,
}

pub fn build_partitions(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    cells: usize,
    pilot_size: usize,
    seed: u64,
) -> Result<Partitions> {
    if cells == 0 {
        return Err(Error::config("number of cells L must be >= 1"));
    }
    if pilot_size < 50 * cells {
        return Err(Error::config(format!(
            "pilot_size {pilot_size} is below 50 * L = {}",
            50 * cells
        )));
    }
    let states = simulate_states(spec, grid, pilot_size, derive_seed(seed, PILOT_STREAM_TAG))?;
    let mut state = Vec::with_capacity(states.len());
    for (k, xs) in states.iter().enumerate() {
        let (p, collapsed) = Partition1D::from_samples(xs, cells)?;
        if collapsed && k > 0 {
            warn!(
                "state partition at step {k}: pilot mass atoms collapsed {cells} cells into {}",
                p.n_cells()
            );
        }
        state.push(p);
    }
    Ok(Partitions {
        state,
        increments: Partition1D::gaussian(cells, grid.h)?,
    })
}

/// One block of `p_k`. `level` is `None` for the base block, `Some(l)` for the
/// block ending with `ΔB_l/√h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub level: Option<usize>,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLayout {
    pub blocks: Vec<Block>,
    pub dim: usize,
}

/// Per-step layouts of `p_k` and the partitions they are built on.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    pub n_steps: usize,
    pub cells: usize,
    pub depth_cap: usize,
    pub h: f64,
    pub partitions: Partitions,
    pub layouts: Vec<StepLayout>,
}

/// Closed-form dimension of `p_k` at full depth with `L` cells everywhere.
pub fn full_depth_dim(n_steps: usize, k: usize, cells: usize) -> usize {
    cells + (1..=n_steps - k).map(|m| cells.pow(m as u32)).sum::<usize>()
}

pub fn assemble_basis(
    partitions: Partitions,
    grid: &TimeGrid,
    depth_cap: Option<usize>,
    hard_cap: usize,
) -> Result<BasisSystem> {
    let n = grid.n_steps;
    if partitions.state.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "{} state partitions for N = {n}",
            partitions.state.len()
        )));
    }
    let depth_cap = match depth_cap {
        Some(0) => return Err(Error::config("depth_cap must be >= 1")),
        Some(d) => d.min(n),
        None => n,
    };
    let cells = partitions.increments.n_cells();
    let mut layouts = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = partitions.state[k].n_cells();
        let mut blocks = vec![Block {
            level: None,
            offset: 0,
            size: s,
        }];
        let mut dim = s;
        for l in (k..n).rev() {
            if n - l > depth_cap {
                continue;
            }
            let size = cells
                .checked_pow((n - 1 - l) as u32)
                .and_then(|v| v.checked_mul(s))
                .filter(|&v| v <= hard_cap)
                .ok_or_else(|| too_large(k, hard_cap))?;
            blocks.push(Block {
                level: Some(l),
                offset: dim,
                size,
            });
            dim += size;
        }
        if 2 * dim > hard_cap {
            return Err(too_large(k, hard_cap));
        }
        layouts.push(StepLayout { blocks, dim });
    }
    Ok(BasisSystem {
        n_steps: n,
        cells,
        depth_cap,
        h: grid.h,
        partitions,
        layouts,
    })
}

fn too_large(k: usize, cap: usize) -> Error {
    Error::config(format!(
        "basis dimension at step {k} exceeds the hard cap {cap} (2·D_k); lower depth_cap or L"
    ))
}

/// Sparse `p_k` for a set of samples: exactly `stride` entries per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBasis {
    pub dim: usize,
    pub stride: usize,
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SampleBasis {
    pub fn n_samples(&self) -> usize {
        if self.stride == 0 {
            0
        } else {
            self.idx.len() / self.stride
        }
    }

    #[inline]
    pub fn entries(&self, m: usize) -> (&[u32], &[f64]) {
        let r = m * self.stride..(m + 1) * self.stride;
        (&self.idx[r.clone()], &self.val[r])
    }

    #[inline]
    pub fn dot(&self, m: usize, coef: &[f64]) -> f64 {
        let (idx, val) = self.entries(m);
        idx.iter().zip(val).map(|(&i, &v)| coef[i as usize] * v).sum()
    }

    #[inline]
    pub fn norm(&self, m: usize) -> f64 {
        self.entries(m).1.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl BasisSystem {
    pub fn dim(&self, k: usize) -> usize {
        self.layouts[k].dim
    }

    pub fn n_blocks(&self, k: usize) -> usize {
        self.layouts[k].blocks.len()
    }

    /// Writes the nonzero pattern of `p_k(x, ΔB_k..ΔB_{N−1})`, one entry per
    /// block in layout order. `db_tail[j - k] = ΔB_j`.
    pub fn eval_p_into(&self, k: usize, x: f64, db_tail: &[f64], idx: &mut Vec<u32>, val: &mut Vec<f64>) {
        let n = self.n_steps;
        let state = &self.partitions.state[k];
        let inc = &self.partitions.increments;
        let i_n = state.cell_of(x);
        let layout = &self.layouts[k];
        let inv_sqrt_h = 1.0 / self.h.sqrt();

        idx.push(i_n as u32);
        val.push(state.norm[i_n]);

        // walk l = N−1 .. k accumulating the tuple index and product of norms
        let mut tuple = i_n;
        let mut prod = state.norm[i_n];
        let mut blocks = layout.blocks[1..].iter().peekable();
        for l in (k..n).rev() {
            if l < n - 1 {
                let i_r = inc.cell_of(db_tail[l + 1 - k]);
                tuple = tuple * self.cells + i_r;
                prod *= inc.norm[i_r];
            }
            match blocks.peek() {
                Some(b) if b.level == Some(l) => {
                    idx.push((b.offset + tuple) as u32);
                    val.push(prod * db_tail[l - k] * inv_sqrt_h);
                    blocks.next();
                }
                _ => {}
            }
        }
    }

    /// Sparse `p_k` for every path of a batch.
    pub fn eval_batch(&self, k: usize, batch: &crate::grid_paths::PathBatch) -> SampleBasis {
        let stride = self.n_blocks(k);
        let mut idx = Vec::with_capacity(batch.n_paths * stride);
        let mut val = Vec::with_capacity(batch.n_paths * stride);
        for m in 0..batch.n_paths {
            self.eval_p_into(k, batch.x(m, k), &batch.db_row(m)[k..], &mut idx, &mut val);
        }
        SampleBasis {
            dim: self.dim(k),
            stride,
            idx,
            val,
        }
    }

    /// Dense `(p_k, v_k)`; `v_k` needs `ΔW_{k+1}` and is empty at `k = N`.
    pub fn eval_basis_vector(&self, k: usize, x: f64, db_tail: &[f64], dw_next: Option<f64>) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim(k);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        self.eval_p_into(k, x, db_tail, &mut idx, &mut val);
        let mut p = vec![0.0; d];
        for (&i, &v) in idx.iter().zip(&val) {
            p[i as usize] = v;
        }
        let v = match dw_next {
            Some(dw) if k < self.n_steps => {
                let scale = dw / self.h.sqrt();
                let mut v = p.clone();
                v.extend(p.iter().map(|a| a * scale));
                v
            }
            _ => Vec::new(),
        };
        (p, v)
    }

    /// Hash of everything that determines the basis functions.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.n_steps.hash(&mut hasher);
        self.cells.hash(&mut hasher);
        self.depth_cap.hash(&mut hasher);
        self.h.to_bits().hash(&mut hasher);
        for p in self.partitions.state.iter().chain(std::iter::once(&self.partitions.increments)) {
            for v in p.edges.iter().chain(&p.norm) {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// Copy of the basis with the state-cell probabilities of step `k`
    /// replaced (normalizations follow).
    pub fn with_state_probs(&self, k: usize, probs: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.partitions.state[k] = self.partitions.state[k].with_probs(probs)?;
        Ok(out)
    }

    /// CSV table `k,D_k,blocks,nnz_per_sample`.
    pub fn write_info_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "D_k", "blocks", "nnz_per_sample"])?;
        for (k, layout) in self.layouts.iter().enumerate() {
            let sizes: Vec<String> = layout.blocks.iter().map(|b| b.size.to_string()).collect();
            w.write_record([
                k.to_string(),
                layout.dim.to_string(),
                sizes.join(" "),
                layout.blocks.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
