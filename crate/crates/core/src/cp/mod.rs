//! Rank-R CP (CANDECOMP/PARAFAC) decompositions of dense tensors.
//!
//! Three solvers share one representation:
//!
//! * [`cp_als`]: alternating least squares with a small ridge;
//! * [`cp_nls`]: joint nonlinear least squares over all factor entries,
//!   solved by Levenberg-Marquardt damped Gauss-Newton;
//! * [`cp_greedy`]: repeated best rank-1 fits of the running residual.
//!
//! Every solver is deterministic for a given [`SolverConfig::seed`]. Restarts
//! run through [`crate::parallel`] and the winner is the strictly smallest
//! residual, ties going to the lowest restart index.

mod als;
mod greedy;
mod nls;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Exec};
use crate::random::{gaussian_vec, SeededRng};
use crate::tensor::{frobenius_norm, DenseTensor, FactorMatrix};

pub use als::cp_als;
pub use greedy::cp_greedy;
pub use nls::{cp_nls, cp_nls_extend};

/// Ridge added to the ALS normal-equation diagonals.
pub const ALS_RIDGE: f64 = 1e-10;

/// How a solver seeds its factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    RandomGaussian,
    AlsWarmStart,
    /// Pad a lower-rank solution with new columns; only meaningful for
    /// [`cp_nls_extend`] and rank sweeps.
    ExtendPreviousRank,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-gaussian" => Ok(Self::RandomGaussian),
            "als-warm-start" => Ok(Self::AlsWarmStart),
            "extend-previous-rank" => Ok(Self::ExtendPreviousRank),
            other => Err(Error::invalid(format!("unknown init strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// ALS sweeps or Gauss-Newton trial steps. `None` picks the method
    /// default (500 sweeps for ALS and rank-1 inner fits, 200 for NLS).
    pub max_iterations: Option<usize>,
    /// Stop once the relative change of the residual norm drops below this.
    pub tolerance: f64,
    /// Initial damping, relative to the largest Gauss-Newton diagonal entry.
    pub damping_init: f64,
    pub restarts: usize,
    pub seed: u64,
    pub init: InitStrategy,
    /// ALS sweeps run before NLS under [`InitStrategy::AlsWarmStart`].
    pub warm_start_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: None,
            tolerance: 1e-10,
            damping_init: 1e-3,
            restarts: 3,
            seed: 0,
            init: InitStrategy::AlsWarmStart,
            warm_start_sweeps: 20,
        }
    }
}

impl SolverConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_init(mut self, init: InitStrategy) -> Self {
        self.init = init;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = Some(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == Some(0) {
            return Err(Error::invalid("max_iterations must be ≥ 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid("tolerance must be > 0"));
        }
        if self.damping_init.is_nan() || self.damping_init <= 0.0 {
            return Err(Error::invalid("damping_init must be > 0"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be ≥ 1"));
        }
        Ok(())
    }

    pub(crate) fn iterations_or(&self, default: usize) -> usize {
        self.max_iterations.unwrap_or(default)
    }
}

/// Decomposition method selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nls,
    Als,
    Greedy,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nls => "nls",
            Method::Als => "als",
            Method::Greedy => "greedy",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nls" => Ok(Method::Nls),
            "als" => Ok(Method::Als),
            "greedy" => Ok(Method::Greedy),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Factor matrices `A_0 .. A_{D-1}` sharing rank R, plus an optional
/// per-component scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CpDecomposition {
    factors: Vec<FactorMatrix>,
    lambda: Option<Vec<f64>>,
}

impl CpDecomposition {
    pub fn new(factors: Vec<FactorMatrix>) -> Result<Self> {
        let rank = factors
            .first()
            .ok_or_else(|| Error::invalid("decomposition needs at least one factor"))?
            .rank();
        if factors.iter().any(|f| f.rank() != rank) {
            return Err(Error::invalid("factor matrices disagree on rank"));
        }
        Ok(Self { factors, lambda: None })
    }

    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != self.rank() || lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("lambda must be finite with one entry per component"));
        }
        self.lambda = Some(lambda);
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.factors[0].rank()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(FactorMatrix::rows).collect()
    }

    pub fn factors(&self) -> &[FactorMatrix] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<FactorMatrix> {
        self.absorbed().factors
    }

    pub fn lambda(&self) -> Option<&[f64]> {
        self.lambda.as_deref()
    }

    /// Folds `lambda` into the first factor.
    pub fn absorbed(mut self) -> Self {
        if let Some(lambda) = self.lambda.take() {
            for (r, l) in lambda.into_iter().enumerate() {
                self.factors[0].scale_column(r, l);
            }
        }
        self
    }

    /// Rescales every component so its column norms are equal across modes.
    ///
    /// A component with a zero column in any mode is zeroed everywhere.
    pub fn normalize(&mut self) {
        if let Some(lambda) = self.lambda.take() {
            for (r, l) in lambda.into_iter().enumerate() {
                self.factors[0].scale_column(r, l);
            }
        }
        let d = self.factors.len() as f64;
        for r in 0..self.rank() {
            let norms: Vec<f64> = self.factors.iter().map(|f| f.column_norm(r)).collect();
            if norms.contains(&0.0) {
                self.factors.iter_mut().for_each(|f| f.scale_column(r, 0.0));
                continue;
            }
            let target = norms.iter().map(|n| n.ln()).sum::<f64>() / d;
            let target = target.exp();
            for (f, n) in self.factors.iter_mut().zip(&norms) {
                f.scale_column(r, target / n);
            }
        }
    }

    pub fn reconstruct(&self) -> DenseTensor<f64> {
        reconstruct(self)
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().all(|f| f.data().iter().all(|v| v.is_finite()))
    }
}

/// Result of one solver call.
#[derive(Debug, Clone)]
pub struct CpFit {
    pub decomposition: CpDecomposition,
    /// `‖reconstruct − t‖ / ‖t‖`.
    pub rel_error: f64,
    /// Relative error after each sweep / accepted step / component of the
    /// winning run, starting from its initialization.
    pub trace: Vec<f64>,
    /// Index of the winning restart.
    pub restart: usize,
}

/// `Σ_r λ_r ∏_m A_m(i_m, r)` for every multi-index.
pub fn reconstruct(d: &CpDecomposition) -> DenseTensor<f64> {
    let shape = d.shape();
    let rank = d.rank();
    let factors = d.factors();
    let mut out = vec![0.0; shape.iter().product()];
    let start = d.lambda().map_or_else(|| vec![1.0; rank], <[f64]>::to_vec);
    let mut scratch = vec![vec![0.0; rank]; shape.len()];
    reconstruct_rec(factors, &shape, 0, 0, &start, &mut scratch, &mut out);
    DenseTensor::from_parts(shape, out)
}

fn reconstruct_rec(
    factors: &[FactorMatrix],
    shape: &[usize],
    axis: usize,
    base: usize,
    prod: &[f64],
    scratch: &mut [Vec<f64>],
    out: &mut [f64],
) {
    let n = shape[axis];
    let f = &factors[axis];
    if axis + 1 == shape.len() {
        for i in 0..n {
            out[base * n + i] = f.row(i).iter().zip(prod).map(|(a, p)| a * p).sum();
        }
        return;
    }
    let (cur, rest) = scratch.split_first_mut().expect("scratch depth");
    for i in 0..n {
        for ((c, a), p) in cur.iter_mut().zip(f.row(i)).zip(prod) {
            *c = a * p;
        }
        reconstruct_rec(factors, shape, axis + 1, base * n + i, cur, rest, out);
    }
}

/// Matricized tensor times Khatri-Rao product for `mode`:
/// `M(i, r) = Σ_{idx: i_mode = i} t(idx) ∏_{k≠mode} A_k(i_k, r)`.
pub(crate) fn mttkrp(t: &DenseTensor<f64>, factors: &[FactorMatrix], mode: usize) -> Vec<f64> {
    let shape = t.shape();
    let rank = factors[0].rank();
    let mut out = vec![0.0; shape[mode] * rank];
    let ones = vec![1.0; rank];
    let mut scratch = vec![vec![0.0; rank]; shape.len()];
    let ctx = Mttkrp {
        data: t.data(),
        shape,
        factors,
        mode,
        rank,
    };
    ctx.walk(0, 0, 0, &ones, &mut scratch, &mut out);
    out
}

struct Mttkrp<'a> {
    data: &'a [f64],
    shape: &'a [usize],
    factors: &'a [FactorMatrix],
    mode: usize,
    rank: usize,
}

impl Mttkrp<'_> {
    fn walk(&self, axis: usize, base: usize, row: usize, prod: &[f64], scratch: &mut [Vec<f64>], out: &mut [f64]) {
        let n = self.shape[axis];
        let f = &self.factors[axis];
        let r = self.rank;
        if axis + 1 == self.shape.len() {
            for i in 0..n {
                let v = self.data[base * n + i];
                if v == 0.0 {
                    continue;
                }
                if axis == self.mode {
                    let dst = &mut out[i * r..(i + 1) * r];
                    dst.iter_mut().zip(prod).for_each(|(o, p)| *o += v * p);
                } else {
                    let dst = &mut out[row * r..(row + 1) * r];
                    for ((o, p), a) in dst.iter_mut().zip(prod).zip(f.row(i)) {
                        *o += v * p * a;
                    }
                }
            }
            return;
        }
        let (cur, rest) = scratch.split_first_mut().expect("scratch depth");
        for i in 0..n {
            if axis == self.mode {
                cur.copy_from_slice(prod);
                self.walk(axis + 1, base * n + i, i, cur, rest, out);
            } else {
                for ((c, a), p) in cur.iter_mut().zip(f.row(i)).zip(prod) {
                    *c = a * p;
                }
                self.walk(axis + 1, base * n + i, row, cur, rest, out);
            }
        }
    }
}

/// Elementwise product of the Gram matrices of all factors except `skip`.
pub(crate) fn gram_hadamard(grams: &[Vec<f64>], rank: usize, skip: &[usize]) -> Vec<f64> {
    let mut out = vec![1.0; rank * rank];
    for (k, g) in grams.iter().enumerate() {
        if skip.contains(&k) {
            continue;
        }
        out.iter_mut().zip(g).for_each(|(o, v)| *o *= v);
    }
    out
}

/// Relative residual norm of `factors` against `t`.
pub(crate) fn residual_rel(t: &DenseTensor<f64>, t_norm: f64, factors: &[FactorMatrix]) -> f64 {
    let approx = reconstruct_factors(factors);
    let sq: f64 = approx.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    sq.sqrt() / t_norm
}

pub(crate) fn reconstruct_factors(factors: &[FactorMatrix]) -> DenseTensor<f64> {
    // factors are validated by the caller; avoid re-checking on hot paths
    let d = CpDecomposition {
        factors: factors.to_vec(),
        lambda: None,
    };
    reconstruct(&d)
}

/// Random Gaussian factors scaled so that `‖reconstruct‖ ≈ ‖t‖`.
pub(crate) fn random_factors(shape: &[usize], rank: usize, t_norm: f64, rng: &mut SeededRng) -> Vec<FactorMatrix> {
    let numel: f64 = shape.iter().map(|&n| n as f64).product();
    let per_mode = (t_norm.max(f64::MIN_POSITIVE) / (rank as f64 * numel).sqrt()).powf(1.0 / shape.len() as f64);
    shape
        .iter()
        .map(|&n| FactorMatrix::from_vec(n, rank, gaussian_vec(rng, n * rank, per_mode)).expect("valid factor shape"))
        .collect()
}

pub(crate) fn check_inputs(t: &DenseTensor<f64>, rank: usize, cfg: &SolverConfig) -> Result<f64> {
    if rank == 0 {
        return Err(Error::invalid("rank must be ≥ 1"));
    }
    cfg.validate()?;
    let norm = frobenius_norm(t);
    if norm == 0.0 {
        return Err(Error::Domain("cannot decompose a zero tensor".into()));
    }
    Ok(norm)
}

/// Runs `restarts` independent attempts and keeps the best finite one.
///
/// Attempt `k` first uses stream `k`; a non-finite run is retried on streams
/// `k + restarts` and `k + 2·restarts` before it is given up.
pub(crate) fn best_of_restarts<F>(restarts: usize, attempt: F) -> Result<CpFit>
where
    F: Fn(usize, u64) -> Option<CpFit> + Sync + Send,
{
    let runs = map_indexed(Exec::default(), restarts, |k| {
        (0..3u64)
            .map(|retry| k as u64 + retry * restarts as u64)
            .find_map(|stream| attempt(k, stream).filter(|f| f.rel_error.is_finite() && f.decomposition.is_finite()))
    });
    let mut best: Option<CpFit> = None;
    for fit in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| fit.rel_error < b.rel_error) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::SolverFailure("every restart produced a non-finite residual".into()))
}

/// Dispatches to the solver named by `method`.
pub fn decompose(t: &DenseTensor<f64>, rank: usize, method: Method, cfg: &SolverConfig) -> Result<CpFit> {
    match method {
        Method::Nls => cp_nls(t, rank, cfg),
        Method::Als => cp_als(t, rank, cfg),
        Method::Greedy => cp_greedy(t, rank, cfg),
    }
}

/// The 2×2×2 tensor with frontal slices `[[1,0],[0,1]]` and `[[1,1],[0,2]]`:
/// rank two, yet two greedy rank-1 steps leave a residual of Frobenius norm
/// about 0.35.
pub fn appendix_tensor() -> DenseTensor<f64> {
    let slices = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 2.0]]];
    DenseTensor::from_fn(&[2, 2, 2], |idx| slices[idx[2]][idx[0]][idx[1]]).expect("static shape")
}
