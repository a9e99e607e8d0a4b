//! Nonlinear least squares over all factor entries at once.
//!
//! The unknown vector stacks the factor matrices in mode order, each
//! row-major. With residual `e = reconstruct(A) − t` and objective `½‖e‖²`,
//! the Gauss-Newton matrix `JᵀJ` has closed-form blocks built from the factor
//! Gram matrices `G_k = A_kᵀA_k`:
//!
//! * diagonal block `m`: `[(i,r),(j,s)] = δ_ij Γ_m(r,s)` with
//!   `Γ_m = ∘_{k≠m} G_k`;
//! * off-diagonal block `(m,n)`: `[(i,r),(j,s)] = A_m(i,s) A_n(j,r) Γ_mn(r,s)`
//!   with `Γ_mn = ∘_{k∉{m,n}} G_k`;
//!
//! and gradient `g_m = A_m Γ_m − MTTKRP(t, m)`. Each step solves
//! `(JᵀJ + λI) δ = −g`; λ is divided by 10 after an accepted step and
//! multiplied by 10 after a rejected one, so the residual never increases.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve};
use crate::random::seeded;
use crate::tensor::{frobenius_norm, DenseTensor, FactorMatrix};

use super::als::{als_sweeps, finish};
use super::{
    best_of_restarts, check_inputs, gram_hadamard, mttkrp, random_factors, residual_rel, CpDecomposition, CpFit,
    InitStrategy, SolverConfig,
};

pub(crate) const DEFAULT_STEPS: usize = 200;

/// Damped Gauss-Newton CP solver, best of `cfg.restarts`.
///
/// Under [`InitStrategy::AlsWarmStart`] each restart runs
/// `cfg.warm_start_sweeps` ALS sweeps from a random start first. The result's
/// residual never exceeds that of its initialization.
pub fn cp_nls(t: &DenseTensor<f64>, rank: usize, cfg: &SolverConfig) -> Result<CpFit> {
    let t_norm = check_inputs(t, rank, cfg)?;
    if cfg.init == InitStrategy::ExtendPreviousRank {
        return Err(Error::invalid(
            "extend-previous-rank needs a previous decomposition; use cp_nls_extend",
        ));
    }
    let steps = cfg.iterations_or(DEFAULT_STEPS);
    best_of_restarts(cfg.restarts, |k, stream| {
        let mut rng = seeded(cfg.seed, stream);
        let mut init = random_factors(t.shape(), rank, t_norm, &mut rng);
        if cfg.init == InitStrategy::AlsWarmStart && cfg.warm_start_sweeps > 0 {
            init = als_sweeps(t, t_norm, init, cfg.warm_start_sweeps, cfg.tolerance).0;
        }
        let (factors, trace) = gauss_newton(t, t_norm, init, steps, cfg);
        finish(factors, trace, k)
    })
}

/// NLS at `rank` started from `previous` (rank < `rank`) padded with new
/// columns.
///
/// Restart 0 pads with zero columns, so its starting residual equals the
/// previous one. Zero columns sit on a stationary point of the new
/// components, so the other restarts fill them with a rank-`extra` ALS fit
/// (`cfg.warm_start_sweeps` sweeps from a random start) of the residual left
/// by `previous`. The best restart never ends above the previous residual.
pub fn cp_nls_extend(
    t: &DenseTensor<f64>,
    previous: &CpDecomposition,
    rank: usize,
    cfg: &SolverConfig,
) -> Result<CpFit> {
    let t_norm = check_inputs(t, rank, cfg)?;
    if previous.shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            expected: t.shape().to_vec(),
            actual: previous.shape(),
        });
    }
    if previous.rank() > rank {
        return Err(Error::invalid(format!(
            "cannot extend a rank-{} decomposition down to rank {rank}",
            previous.rank()
        )));
    }
    let base = previous.clone().absorbed();
    let extra = rank - base.rank();
    let mut residual = t.clone();
    let recon = base.reconstruct();
    residual
        .data_mut()
        .iter_mut()
        .zip(recon.data())
        .for_each(|(r, v)| *r -= v);
    let res_norm = frobenius_norm(&residual);
    let steps = cfg.iterations_or(DEFAULT_STEPS);
    best_of_restarts(cfg.restarts, |k, stream| {
        let init: Vec<FactorMatrix> = if (k == 0 && stream == 0) || extra == 0 || res_norm == 0.0 {
            base.factors()
                .iter()
                .map(|f| f.with_extra_columns(extra, |_, _| 0.0))
                .collect()
        } else {
            let mut rng = seeded(cfg.seed, stream);
            let fresh = random_factors(t.shape(), extra, res_norm, &mut rng);
            let sweeps = cfg.warm_start_sweeps.max(1);
            let (fresh, _) = als_sweeps(&residual, res_norm, fresh, sweeps, cfg.tolerance);
            base.factors()
                .iter()
                .zip(&fresh)
                .map(|(f, n)| f.with_extra_columns(extra, |i, c| n.get(i, c)))
                .collect()
        };
        let (factors, trace) = gauss_newton(t, t_norm, init, steps, cfg);
        finish(factors, trace, k)
    })
}

/// Levenberg-Marquardt iterations; returns the final factors and the relative
/// residual after the initialization and every accepted step.
pub(crate) fn gauss_newton(
    t: &DenseTensor<f64>,
    t_norm: f64,
    mut factors: Vec<FactorMatrix>,
    max_steps: usize,
    cfg: &SolverConfig,
) -> (Vec<FactorMatrix>, Vec<f64>) {
    let layout = Layout::new(&factors);
    let mut err = residual_rel(t, t_norm, &factors);
    let mut trace = vec![err];
    if !err.is_finite() {
        return (factors, trace);
    }
    let mut lambda: Option<f64> = None;
    let mut system = Vec::new();
    let mut steps = 0;
    'outer: while steps < max_steps && err > 1e-15 {
        let (jtj, grad) = layout.normal_equations(t, &factors);
        let scale = (0..layout.n)
            .map(|i| jtj[i * layout.n + i])
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut lam = lambda.unwrap_or(cfg.damping_init * scale);
        loop {
            if steps >= max_steps || lam > 1e16 * scale {
                break 'outer;
            }
            steps += 1;
            system.clear();
            system.extend_from_slice(&jtj);
            for i in 0..layout.n {
                system[i * layout.n + i] += lam;
            }
            if !cholesky(&mut system, layout.n) {
                lam *= 10.0;
                continue;
            }
            let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
            cholesky_solve(&system, layout.n, &mut step);
            let trial = layout.apply(&factors, &step);
            let trial_err = residual_rel(t, t_norm, &trial);
            if trial_err.is_finite() && trial_err < err {
                let rel_change = (err - trial_err) / err;
                factors = trial;
                err = trial_err;
                trace.push(err);
                lambda = Some((lam / 10.0).max(1e-15 * scale));
                if rel_change < cfg.tolerance {
                    break 'outer;
                }
                continue 'outer;
            }
            lam *= 10.0;
        }
    }
    (factors, trace)
}

/// Offsets of each factor inside the stacked unknown vector.
struct Layout {
    rank: usize,
    rows: Vec<usize>,
    offsets: Vec<usize>,
    n: usize,
}

impl Layout {
    fn new(factors: &[FactorMatrix]) -> Self {
        let rank = factors[0].rank();
        let rows: Vec<usize> = factors.iter().map(FactorMatrix::rows).collect();
        let mut offsets = Vec::with_capacity(rows.len());
        let mut n = 0;
        for &r in &rows {
            offsets.push(n);
            n += r * rank;
        }
        Self { rank, rows, offsets, n }
    }

    fn normal_equations(&self, t: &DenseTensor<f64>, factors: &[FactorMatrix]) -> (Vec<f64>, Vec<f64>) {
        let (n, rank, modes) = (self.n, self.rank, factors.len());
        let grams: Vec<Vec<f64>> = factors.iter().map(FactorMatrix::gram).collect();
        let mut jtj = vec![0.0; n * n];
        let mut grad = vec![0.0; n];

        for m in 0..modes {
            let gamma = gram_hadamard(&grams, rank, &[m]);
            let off = self.offsets[m];
            for i in 0..self.rows[m] {
                let base = off + i * rank;
                for r in 0..rank {
                    jtj[(base + r) * n + base..(base + r) * n + base + rank]
                        .copy_from_slice(&gamma[r * rank..(r + 1) * rank]);
                }
            }

            let m_krp = mttkrp(t, factors, m);
            let a = &factors[m];
            for i in 0..self.rows[m] {
                let row = a.row(i);
                for r in 0..rank {
                    let ag: f64 = (0..rank).map(|s| row[s] * gamma[s * rank + r]).sum();
                    grad[off + i * rank + r] = ag - m_krp[i * rank + r];
                }
            }

            for q in m + 1..modes {
                let gamma_mq = gram_hadamard(&grams, rank, &[m, q]);
                let (am, aq) = (&factors[m], &factors[q]);
                let off_q = self.offsets[q];
                for i in 0..self.rows[m] {
                    let row_m = am.row(i);
                    for r in 0..rank {
                        let p = off + i * rank + r;
                        for j in 0..self.rows[q] {
                            let row_q = aq.row(j);
                            let aq_jr = row_q[r];
                            for s in 0..rank {
                                let v = row_m[s] * aq_jr * gamma_mq[r * rank + s];
                                let c = off_q + j * rank + s;
                                jtj[p * n + c] = v;
                                jtj[c * n + p] = v;
                            }
                        }
                    }
                }
            }
        }
        (jtj, grad)
    }

    fn apply(&self, factors: &[FactorMatrix], step: &[f64]) -> Vec<FactorMatrix> {
        factors
            .iter()
            .zip(&self.offsets)
            .map(|(f, &off)| {
                let mut g = f.clone();
                g.data_mut()
                    .iter_mut()
                    .zip(&step[off..off + f.data().len()])
                    .for_each(|(x, d)| *x += d);
                g
            })
            .collect()
    }
}
