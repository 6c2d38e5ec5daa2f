//! Time grid and reproducible simulation of the path batch.
//!
//! Every Gaussian draw comes from a ChaCha stream keyed by `(seed, path,
//! process)`; the draw for step `k` is the `k`-th normal of that stream. A batch
//! is therefore a pure function of its parameters whatever the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;

/// Uniform time grid `t_k = k h`, `h = T / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub horizon: f64,
    pub h: f64,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn sqrt_h(&self) -> f64 {
        self.h.sqrt()
    }
}

pub fn build_time_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    if n_steps == 0 {
        return Err(Error::config("number of time steps must be >= 1"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config(format!("horizon must be > 0, got {horizon}")));
    }
    let h = horizon / n_steps as f64;
    let mut times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * h).collect();
    times[n_steps] = horizon;
    Ok(TimeGrid {
        n_steps,
        horizon,
        h,
        times,
    })
}

/// Which Brownian motion a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Process {
    W = 0,
    B = 1,
}

/// Mixes a base seed with a purpose tag (SplitMix64 finalizer), so that pilot,
/// hold-out and replicate batches draw from unrelated streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, path: usize, process: Process) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((path as u64) << 1 | process as u64);
    rng
}

/// `M` simulated paths: increments `ΔW_{k+1}` and `ΔB_k` over `[t_k, t_{k+1}]`
/// (row-major `M × N`) and Euler states (row-major `M × (N+1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    dw: Vec<f64>,
    db: Vec<f64>,
    x: Vec<f64>,
}

impl PathBatch {
    /// Builds a batch from given increments, running the Euler recursion.
    pub fn from_increments(
        spec: &ProblemSpec,
        grid: &TimeGrid,
        dw: Vec<f64>,
        db: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = grid.n_steps;
        if dw.len() != db.len() || dw.len() % n != 0 || dw.is_empty() {
            return Err(Error::Dimension(format!(
                "increment arrays of length {} / {} do not fit N = {n}",
                dw.len(),
                db.len()
            )));
        }
        let n_paths = dw.len() / n;
        let mut x = vec![0.0; n_paths * (n + 1)];
        for m in 0..n_paths {
            euler_path(spec, grid.h, &dw[m * n..(m + 1) * n], &mut x[m * (n + 1)..(m + 1) * (n + 1)])
                .map_err(|step| Error::NonFiniteState { path: m, step })?;
        }
        Ok(Self {
            n_paths,
            n_steps: n,
            seed,
            dw,
            db,
            x,
        })
    }

    #[inline]
    pub fn dw(&self, m: usize, k: usize) -> f64 {
        self.dw[m * self.n_steps + k]
    }

    #[inline]
    pub fn db(&self, m: usize, k: usize) -> f64 {
        self.db[m * self.n_steps + k]
    }

    #[inline]
    pub fn x(&self, m: usize, k: usize) -> f64 {
        self.x[m * (self.n_steps + 1) + k]
    }

    /// `ΔW_1, …, ΔW_N` of path `m`.
    pub fn dw_row(&self, m: usize) -> &[f64] {
        &self.dw[m * self.n_steps..(m + 1) * self.n_steps]
    }

    /// `ΔB_0, …, ΔB_{N−1}` of path `m`.
    pub fn db_row(&self, m: usize) -> &[f64] {
        &self.db[m * self.n_steps..(m + 1) * self.n_steps]
    }

    /// `X_0, …, X_N` of path `m`.
    pub fn x_row(&self, m: usize) -> &[f64] {
        &self.x[m * (self.n_steps + 1)..(m + 1) * (self.n_steps + 1)]
    }

    /// CSV dump with header `m,k,t,dW,dB,X`. Rows run over `k = 0..=N`; the
    /// increment cells of the terminal row are empty.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "k", "t", "dW", "dB", "X"])?;
        for m in 0..self.n_paths {
            for k in 0..=self.n_steps {
                let (dw, db) = if k < self.n_steps {
                    (self.dw(m, k).to_string(), self.db(m, k).to_string())
                } else {
                    (String::new(), String::new())
                };
                w.write_record([
                    m.to_string(),
                    k.to_string(),
                    grid.times[k].to_string(),
                    dw,
                    db,
                    self.x(m, k).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn euler_path(spec: &ProblemSpec, h: f64, dw: &[f64], x: &mut [f64]) -> std::result::Result<(), usize> {
    x[0] = spec.x0;
    for k in 0..dw.len() {
        let xk = x[k];
        let next = xk + h * spec.b(xk) + spec.sigma(xk) * dw[k];
        if !next.is_finite() {
            return Err(k + 1);
        }
        x[k + 1] = next;
    }
    Ok(())
}

/// Simulates `n_paths` Euler paths with independent `N(0, h)` increments for
/// `W` and `B`.
pub fn simulate_paths(spec: &ProblemSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(Error::config("number of paths must be >= 1"));
    }
    let n = grid.n_steps;
    let sqrt_h = grid.sqrt_h();
    let mut dw = vec![0.0; n_paths * n];
    let mut db = vec![0.0; n_paths * n];
    let mut x = vec![0.0; n_paths * (n + 1)];

    dw.par_chunks_mut(n)
        .zip(db.par_chunks_mut(n))
        .zip(x.par_chunks_mut(n + 1))
        .enumerate()
        .try_for_each(|(m, ((dw_row, db_row), x_row))| {
            let mut w_rng = stream(seed, m, Process::W);
            let mut b_rng = stream(seed, m, Process::B);
            for k in 0..n {
                let zw: f64 = StandardNormal.sample(&mut w_rng);
                let zb: f64 = StandardNormal.sample(&mut b_rng);
                dw_row[k] = sqrt_h * zw;
                db_row[k] = sqrt_h * zb;
            }
            euler_path(spec, grid.h, dw_row, x_row).map_err(|step| Error::NonFiniteState { path: m, step })
        })?;

    Ok(PathBatch {
        n_paths,
        n_steps: n,
        seed,
        dw,
        db,
        x,
    })
}

/// Simulates only the Euler states `X_k` (one `Vec` per `k = 0..=N`), used for
/// pilot quantiles. Same stream layout as [`simulate_paths`].
pub fn simulate_states(spec: &ProblemSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let batch = simulate_paths(spec, grid, n_paths, seed)?;
    Ok((0..=grid.n_steps)
        .map(|k| (0..n_paths).map(|m| batch.x(m, k)).collect())
        .collect())
}
