use crate::error::Result;
use crate::linalg::solve_spd_rows;
use crate::random::seeded;
use crate::tensor::{DenseTensor, FactorMatrix};

use super::{
    best_of_restarts, check_inputs, gram_hadamard, mttkrp, random_factors, residual_rel, CpDecomposition, CpFit,
    SolverConfig, ALS_RIDGE,
};

pub(crate) const DEFAULT_SWEEPS: usize = 500;

/// Alternating least squares from random Gaussian starts, best of
/// `cfg.restarts`.
///
/// Each sweep solves every mode's normal equations with a `1e-10` ridge and
/// rebalances the component norms; `trace` holds the relative error after
/// each sweep and is non-increasing up to rounding.
pub fn cp_als(t: &DenseTensor<f64>, rank: usize, cfg: &SolverConfig) -> Result<CpFit> {
    let t_norm = check_inputs(t, rank, cfg)?;
    let sweeps = cfg.iterations_or(DEFAULT_SWEEPS);
    best_of_restarts(cfg.restarts, |k, stream| {
        let mut rng = seeded(cfg.seed, stream);
        let init = random_factors(t.shape(), rank, t_norm, &mut rng);
        let (factors, trace) = als_sweeps(t, t_norm, init, sweeps, cfg.tolerance);
        finish(factors, trace, k)
    })
}

pub(crate) fn finish(factors: Vec<FactorMatrix>, trace: Vec<f64>, restart: usize) -> Option<CpFit> {
    let rel_error = *trace.last()?;
    let mut decomposition = CpDecomposition::new(factors).ok()?;
    decomposition.normalize();
    Some(CpFit {
        decomposition,
        rel_error,
        trace,
        restart,
    })
}

/// Runs ALS sweeps from `factors` until the relative residual change falls
/// below `tol` or `max_sweeps` is reached. The first trace entry is the
/// residual of the initialization.
pub(crate) fn als_sweeps(
    t: &DenseTensor<f64>,
    t_norm: f64,
    mut factors: Vec<FactorMatrix>,
    max_sweeps: usize,
    tol: f64,
) -> (Vec<FactorMatrix>, Vec<f64>) {
    let rank = factors[0].rank();
    let mut trace = vec![residual_rel(t, t_norm, &factors)];
    let mut grams: Vec<Vec<f64>> = factors.iter().map(FactorMatrix::gram).collect();
    for _ in 0..max_sweeps {
        for m in 0..factors.len() {
            let gamma = gram_hadamard(&grams, rank, &[m]);
            let mut rows = mttkrp(t, &factors, m);
            solve_spd_rows(&gamma, rank, ALS_RIDGE, &mut rows);
            factors[m].data_mut().copy_from_slice(&rows);
            grams[m] = factors[m].gram();
        }
        balance(&mut factors);
        grams = factors.iter().map(FactorMatrix::gram).collect();

        let err = residual_rel(t, t_norm, &factors);
        let prev = *trace.last().expect("non-empty trace");
        trace.push(err);
        if !err.is_finite() || err < 1e-15 || (prev - err).abs() <= tol * prev {
            break;
        }
    }
    (factors, trace)
}

fn balance(factors: &mut Vec<FactorMatrix>) {
    let mut d = CpDecomposition {
        factors: std::mem::take(factors),
        lambda: None,
    };
    d.normalize();
    *factors = d.factors;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{appendix_tensor, reconstruct, CpDecomposition};
    use crate::tensor::{outer_rank1, relative_error};
    use crate::testutil::random_factor;

    fn planted(shape: &[usize], rank: usize, seed: u64) -> DenseTensor<f64> {
        let f: Vec<_> = shape
            .iter()
            .enumerate()
            .map(|(k, &n)| random_factor(n, rank, seed + k as u64))
            .collect();
        reconstruct(&CpDecomposition::new(f).unwrap())
    }

    #[test]
    fn exact_rank1() {
        let t = outer_rank1(&[vec![1.0, -2.0, 0.5], vec![3.0, 1.0], vec![0.2, 0.4, 1.0, -1.0]]).unwrap();
        let fit = cp_als(&t, 1, &SolverConfig::default()).unwrap();
        assert!(fit.rel_error <= 1e-10, "{}", fit.rel_error);
        let recon = reconstruct(&fit.decomposition);
        assert!(relative_error(&recon, &t).unwrap() <= 1e-10);
    }

    #[test]
    fn planted_rank4_four_way() {
        let t = planted(&[5, 5, 6, 7], 4, 300);
        let cfg = SolverConfig::default().with_restarts(5).with_seed(1);
        let fit = cp_als(&t, 4, &cfg).unwrap();
        assert!(fit.rel_error <= 1e-6, "{}", fit.rel_error);
    }

    #[test]
    fn sweeps_are_monotone_on_appendix_tensor() {
        let t = appendix_tensor();
        for seed in 0..5 {
            let fit = cp_als(&t, 2, &SolverConfig::default().with_seed(seed)).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn rank_may_exceed_every_dimension() {
        let t = planted(&[2, 3, 2], 2, 9);
        let fit = cp_als(&t, 5, &SolverConfig::default()).unwrap();
        assert_eq!(fit.decomposition.rank(), 5);
        assert!(fit.rel_error < 1e-4);
    }

    #[test]
    fn result_is_balanced() {
        let t = planted(&[4, 3, 5], 2, 77);
        let fit = cp_als(&t, 2, &SolverConfig::default()).unwrap();
        for r in 0..2 {
            let n: Vec<f64> = fit.decomposition.factors().iter().map(|f| f.column_norm(r)).collect();
            assert!(n.iter().all(|v| (v - n[0]).abs() <= 1e-10 * n[0].max(1e-300)));
        }
    }
}
