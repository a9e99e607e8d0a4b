//! Rank sweeps over a rewritten layer: kernel error, accuracy before and
//! after fine-tuning, predicted cost and measured CPU time.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::cp::{cp_nls, cp_nls_extend, decompose, CpDecomposition, InitStrategy, Method, SolverConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::network::{LayerKind, Network};
use crate::nn::{conv_forward_with, evaluate, train, ConvLayer, TrainConfig};
use crate::parallel::Exec;
use crate::random::{seeded, uniform_vec};
use crate::rewrite::{
    complexity, from_fit, random_conv_stack, rewritable_kernel, splice_factors, splice_stack, ConvKernel,
};
use crate::tensor::{relative_error, DenseTensor};

/// Serializes timed sections across threads.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

/// How a replacement stack is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    /// Untrained stack with fan-scaled uniform weights.
    Random,
    Cp(Method),
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchMethod::Random => f.write_str("random"),
            BenchMethod::Cp(m) => f.write_str(m.as_str()),
        }
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BenchMethod::Random),
            other => other.parse().map(BenchMethod::Cp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            warmup: 2,
            iters: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    /// Zero epochs skips fine-tuning; `acc_after_ft` then repeats
    /// `acc_after_no_ft`.
    pub fine_tune: TrainConfig,
    /// `None` skips timing; the timing columns are then NaN.
    pub timing: Option<TimingConfig>,
    /// Seeds the random baseline and the timing input.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            fine_tune: TrainConfig::fine_tune(),
            timing: Some(TimingConfig::default()),
            seed: 0,
        }
    }
}

/// One (rank, method) cell. Counts are per output pixel for multiply-adds.
/// Unavailable numbers are NaN and `status` says why.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub layer_name: String,
    pub method: String,
    pub rank: usize,
    pub rel_error: f64,
    pub params_original: u64,
    pub params_cp: u64,
    pub param_ratio: f64,
    pub predicted_madds_original: u64,
    pub predicted_madds_cp: u64,
    pub measured_ms_original: f64,
    pub measured_ms_cp: f64,
    pub speedup: f64,
    pub acc_before: f64,
    pub acc_after_no_ft: f64,
    pub acc_after_ft: f64,
    pub status: String,
}

impl BenchReport {
    pub const COLUMNS: &'static [&'static str] = &[
        "layer_name",
        "method",
        "rank",
        "rel_error",
        "params_original",
        "params_cp",
        "param_ratio",
        "predicted_madds_original",
        "predicted_madds_cp",
        "measured_ms_original",
        "measured_ms_cp",
        "speedup",
        "acc_before",
        "acc_after_no_ft",
        "acc_after_ft",
        "status",
    ];

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// `acc_before − acc_after`; positive means the rewrite lost accuracy.
    pub fn drop(&self, fine_tuned: bool) -> f64 {
        self.acc_before
            - if fine_tuned {
                self.acc_after_ft
            } else {
                self.acc_after_no_ft
            }
    }
}

/// Median wall-clock milliseconds of a forward pass through `layers` on a
/// fixed random `batch × C × H × W` input, single-threaded, after `warmup`
/// untimed runs.
pub fn time_layers(
    layers: &[ConvLayer<f32>],
    input_shape: [usize; 3],
    timing: &TimingConfig,
    seed: u64,
) -> Result<f64> {
    if timing.iters < 3 {
        return Err(Error::invalid("timing needs at least 3 iterations"));
    }
    if layers.is_empty() || timing.batch == 0 {
        return Err(Error::invalid("nothing to time"));
    }
    let [c, h, w] = input_shape;
    let mut rng = seeded(seed, 0);
    let n = timing.batch * c * h * w;
    let input: DenseTensor<f32> =
        DenseTensor::from_vec(&[timing.batch, c, h, w], uniform_vec(&mut rng, n, 1.0))?.cast();
    let run = || -> Result<DenseTensor<f32>> {
        let mut x = conv_forward_with(&layers[0], &input, Exec::Sequential)?;
        for l in &layers[1..] {
            x = conv_forward_with(l, &x, Exec::Sequential)?;
        }
        Ok(x)
    };
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    for _ in 0..timing.warmup {
        std::hint::black_box(run()?);
    }
    let mut ms = Vec::with_capacity(timing.iters);
    for _ in 0..timing.iters {
        let start = Instant::now();
        std::hint::black_box(run()?);
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(ms[ms.len() / 2])
}

fn conv_layers_f32(net: &Network, range: std::ops::Range<usize>) -> Vec<ConvLayer<f32>> {
    net.layers()[range]
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv(c) => c.cast(),
            _ => unreachable!("rewritten range holds convolutions only"),
        })
        .collect()
}

struct Sweep<'a> {
    net: &'a Network,
    data: &'a LabeledDataset,
    layer_name: &'a str,
    kernel: ConvKernel,
    layer_input: [usize; 3],
    acc_before: f64,
    ms_original: f64,
    cfg: &'a BenchConfig,
}

impl Sweep<'_> {
    fn blank(&self, method: BenchMethod, rank: usize) -> Result<BenchReport> {
        let [d, _, s, t] = <[usize; 4]>::try_from(self.kernel.tensor.shape()).expect("4-D kernel");
        let cost = complexity(d, s, t, rank)?;
        Ok(BenchReport {
            layer_name: self.layer_name.to_string(),
            method: method.to_string(),
            rank,
            rel_error: f64::NAN,
            params_original: cost.original,
            params_cp: cost.cp,
            param_ratio: cost.ratio_cp,
            predicted_madds_original: cost.original,
            predicted_madds_cp: cost.cp,
            measured_ms_original: self.ms_original,
            measured_ms_cp: f64::NAN,
            speedup: f64::NAN,
            acc_before: self.acc_before,
            acc_after_no_ft: f64::NAN,
            acc_after_ft: f64::NAN,
            status: "ok".into(),
        })
    }

    /// Evaluates, fine-tunes and times the rewritten network.
    fn fill(&self, report: &mut BenchReport, rewritten: &Network) -> Result<()> {
        report.acc_after_no_ft = evaluate(rewritten, self.data)?;
        report.acc_after_ft = if self.cfg.fine_tune.epochs == 0 {
            report.acc_after_no_ft
        } else {
            let (tuned, _) = train(rewritten, self.data, None, &self.cfg.fine_tune)?;
            evaluate(&tuned, self.data)?
        };
        if let Some(timing) = &self.cfg.timing {
            let idx = rewritten.layer_index(&format!("{}.cp1", self.layer_name))?;
            let stack = conv_layers_f32(rewritten, idx..idx + 4);
            report.measured_ms_cp = time_layers(&stack, self.layer_input, timing, self.cfg.seed)?;
            report.speedup = report.measured_ms_original / report.measured_ms_cp;
        }
        Ok(())
    }

    fn cell(&self, method: BenchMethod, rank: usize, decomposition: Result<CpDecomposition>) -> Result<BenchReport> {
        let mut report = self.blank(method, rank)?;
        let outcome = decomposition.and_then(|d| {
            let fit = from_fit(&self.kernel, &d)?;
            report.rel_error = fit.rel_error;
            let rewritten = splice_factors(self.net, self.layer_name, &fit.factors)?;
            self.fill(&mut report, &rewritten)
        });
        if let Err(e) = outcome {
            report.status = format!("failed: {e}");
        }
        Ok(report)
    }

    fn random_cell(&self, rank: usize) -> Result<BenchReport> {
        let mut report = self.blank(BenchMethod::Random, rank)?;
        let [d, _, s, t] = <[usize; 4]>::try_from(self.kernel.tensor.shape()).expect("4-D kernel");
        let padding = match &self.net.layer(self.layer_name)?.kind {
            LayerKind::Conv(c) => c.padding(),
            _ => unreachable!("checked by rewritable_kernel"),
        };
        let stack = random_conv_stack(d, s, t, rank, padding, self.cfg.seed.wrapping_add(rank as u64))?;
        report.rel_error = relative_error(&stack.factors().reconstruct(), &self.kernel.tensor)?;
        let rewritten = splice_stack(self.net, self.layer_name, stack)?;
        if let Err(e) = self.fill(&mut report, &rewritten) {
            report.status = format!("failed: {e}");
        }
        Ok(report)
    }
}

/// One report per (method, rank), methods in the given order and ranks
/// ascending. NLS keeps the better of a cold start and a warm start from its
/// previous rank's solution padded with new columns, so its error does not
/// grow along the sweep.
///
/// A failing cell is reported with its error in `status`; the sweep goes on.
pub fn rank_sweep(
    net: &Network,
    data: &LabeledDataset,
    layer_name: &str,
    ranks: &[usize],
    methods: &[BenchMethod],
    cfg: &BenchConfig,
) -> Result<Vec<BenchReport>> {
    let (kernel, _) = rewritable_kernel(net, layer_name)?;
    if ranks.is_empty() || ranks.contains(&0) || methods.is_empty() {
        return Err(Error::invalid("need at least one method and ranks ≥ 1"));
    }
    cfg.solver.validate()?;
    cfg.fine_tune.validate()?;
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();

    let idx = net.layer_index(layer_name)?;
    let layer_input = net.layer_shapes()?[idx];
    let ms_original = match &cfg.timing {
        Some(t) => time_layers(&conv_layers_f32(net, idx..idx + 1), layer_input, t, cfg.seed)?,
        None => f64::NAN,
    };
    let sweep = Sweep {
        net,
        data,
        layer_name,
        kernel,
        layer_input,
        acc_before: evaluate(net, data)?,
        ms_original,
        cfg,
    };

    let mut reports = Vec::with_capacity(ranks.len() * methods.len());
    for &method in methods {
        let mut previous: Option<CpDecomposition> = None;
        for &rank in &ranks {
            let report = match method {
                BenchMethod::Random => sweep.random_cell(rank)?,
                BenchMethod::Cp(Method::Nls) => {
                    let t = &sweep.kernel.tensor;
                    let fit = match &previous {
                        Some(p) => {
                            let solver = cfg.solver.clone().with_init(InitStrategy::ExtendPreviousRank);
                            match (cp_nls_extend(t, p, rank, &solver), cp_nls(t, rank, &cfg.solver)) {
                                (Ok(warm), Ok(cold)) if cold.rel_error < warm.rel_error => Ok(cold),
                                (Err(_), Ok(cold)) => Ok(cold),
                                (warm, _) => warm,
                            }
                        }
                        None => cp_nls(t, rank, &cfg.solver),
                    };
                    let d = fit.map(|f| f.decomposition);
                    if let Ok(d) = &d {
                        previous = Some(d.clone());
                    }
                    sweep.cell(method, rank, d)?
                }
                BenchMethod::Cp(m) => {
                    let d = decompose(&sweep.kernel.tensor, rank, m, &cfg.solver).map(|f| f.decomposition);
                    sweep.cell(method, rank, d)?
                }
            };
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Accuracy drops of the random baseline, greedy and NLS rewrites per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct DropTable {
    pub ranks: Vec<usize>,
    /// `(method, drop per rank)` for random, greedy and nls, in that order.
    pub rows: Vec<(String, Vec<f64>)>,
    pub fine_tuned: bool,
    pub reports: Vec<BenchReport>,
}

impl DropTable {
    pub fn row(&self, method: &str) -> Option<&[f64]> {
        self.rows.iter().find(|(m, _)| m == method).map(|(_, v)| v.as_slice())
    }
}

impl fmt::Display for DropTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8}", if self.fine_tuned { "FT" } else { "no FT" })?;
        for r in &self.ranks {
            write!(f, " {:>8}", format!("R={r}"))?;
        }
        for (method, drops) in &self.rows {
            write!(f, "\n{method:<8}")?;
            for v in drops {
                write!(f, " {:>8.4}", v)?;
            }
        }
        Ok(())
    }
}

/// Rank sweep over {random, greedy, nls} reduced to accuracy drops
/// (original − approximated; negative values are improvements). Timing is
/// skipped; without `with_ft` so is fine-tuning.
pub fn greedy_vs_nls_table(
    net: &Network,
    data: &LabeledDataset,
    layer_name: &str,
    ranks: &[usize],
    with_ft: bool,
    cfg: &BenchConfig,
) -> Result<DropTable> {
    let mut cfg = cfg.clone();
    cfg.timing = None;
    if !with_ft {
        cfg.fine_tune.epochs = 0;
    }
    let methods = [
        BenchMethod::Random,
        BenchMethod::Cp(Method::Greedy),
        BenchMethod::Cp(Method::Nls),
    ];
    let reports = rank_sweep(net, data, layer_name, ranks, &methods, &cfg)?;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = methods
        .iter()
        .map(|m| {
            let name = m.to_string();
            let drops = reports
                .iter()
                .filter(|r| r.method == name)
                .map(|r| r.drop(with_ft))
                .collect();
            (name, drops)
        })
        .collect();
    Ok(DropTable {
        ranks: sorted,
        rows,
        fine_tuned: with_ft,
        reports,
    })
}
