use crate::error::Result;
use crate::parallel::{map_indexed, Exec};
use crate::random::seeded;
use crate::tensor::{frobenius_norm, DenseTensor, FactorMatrix};

use super::als::{als_sweeps, DEFAULT_SWEEPS};
use super::{check_inputs, random_factors, reconstruct_factors, CpDecomposition, CpFit, SolverConfig};

/// Greedy deflation: `rank` successive best rank-1 fits of the running
/// residual, each found by rank-1 ALS run to `cfg.tolerance` and kept as the
/// best of `cfg.restarts` random starts.
///
/// `trace[c]` is the relative residual after `c` components, so it starts at
/// 1 and never increases.
pub fn cp_greedy(t: &DenseTensor<f64>, rank: usize, cfg: &SolverConfig) -> Result<CpFit> {
    let t_norm = check_inputs(t, rank, cfg)?;
    let sweeps = cfg.iterations_or(DEFAULT_SWEEPS);
    let shape = t.shape().to_vec();
    let mut residual = t.clone();
    let mut columns: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(rank); shape.len()];
    let mut trace = vec![1.0];

    for c in 0..rank {
        let res_norm = frobenius_norm(&residual);
        let component = if res_norm == 0.0 {
            None
        } else {
            best_rank1(&residual, res_norm, sweeps, cfg, c)
        };
        let component = component.unwrap_or_else(|| {
            shape
                .iter()
                .map(|&n| FactorMatrix::zeros(n, 1).expect("positive dims"))
                .collect()
        });
        let outer = reconstruct_factors(&component);
        let mut next = residual.clone();
        next.data_mut().iter_mut().zip(outer.data()).for_each(|(r, o)| *r -= o);
        // a rank-1 ALS sweep can only lower the residual, but keep the
        // sequence monotone even if rounding says otherwise
        let (kept, next_norm) = if frobenius_norm(&next) <= res_norm {
            (component, frobenius_norm(&next))
        } else {
            let zeros = shape
                .iter()
                .map(|&n| FactorMatrix::zeros(n, 1).expect("positive dims"))
                .collect();
            next = residual.clone();
            (zeros, res_norm)
        };
        for (m, f) in kept.iter().enumerate() {
            columns[m].push(f.column(0));
        }
        residual = next;
        trace.push(next_norm / t_norm);
    }

    let factors = columns
        .iter()
        .map(|cols| FactorMatrix::from_columns(cols))
        .collect::<Result<Vec<_>>>()?;
    let mut decomposition = CpDecomposition::new(factors)?;
    decomposition.normalize();
    let rel_error = *trace.last().expect("rank ≥ 1");
    Ok(CpFit {
        decomposition,
        rel_error,
        trace,
        restart: 0,
    })
}

fn best_rank1(
    residual: &DenseTensor<f64>,
    res_norm: f64,
    sweeps: usize,
    cfg: &SolverConfig,
    component: usize,
) -> Option<Vec<FactorMatrix>> {
    let runs = map_indexed(Exec::default(), cfg.restarts, |k| {
        let stream = (component * cfg.restarts + k) as u64;
        let mut rng = seeded(cfg.seed, stream);
        let init = random_factors(residual.shape(), 1, res_norm, &mut rng);
        let (factors, trace) = als_sweeps(residual, res_norm, init, sweeps, cfg.tolerance);
        let err = *trace.last().expect("non-empty trace");
        err.is_finite().then_some((err, factors))
    });
    let mut best: Option<(f64, Vec<FactorMatrix>)> = None;
    for (err, f) in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, f));
        }
    }
    best.map(|(_, f)| f)
}
