use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpconv::bench::{rank_sweep, BenchConfig, BenchMethod, TimingConfig};
use cpconv::cp::{appendix_tensor, cp_greedy, cp_nls, reconstruct, Method, SolverConfig};
use cpconv::data::{gen_synthetic, SyntheticConfig};
use cpconv::io::{
    load_cp, load_dataset, load_network, save_cp, save_dataset, save_network, write_history, write_reports, CpMeta,
};
use cpconv::nn::{toy_network, train, TrainConfig};
use cpconv::rewrite::{complexity, decompose_kernel, rewritable_kernel, splice_factors, KernelCpFactors};
use cpconv::tensor::{frobenius_norm, relative_error};
use cpconv::Error;

/// Exit codes.
const USAGE: u8 = 1;
const SOLVER: u8 = 2;
const VERIFICATION: u8 = 3;

/// Compress convolution layers by CP-decomposing their kernels.
#[derive(Debug, Parser)]
#[command(name = "cpconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose one layer's kernel and write its CP factors.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value = "nls")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a layer by the four-layer stack built from saved factors.
    Rewrite {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (all layers unless frozen) and write it with its history.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long)]
        freeze_inserted: bool,
        /// Global gradient-norm ceiling.
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep ranks and methods over one layer and write a CSV report.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "random,greedy,nls")]
        methods: Vec<BenchMethod>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        /// Fine-tuning epochs per cell; 0 disables fine-tuning.
        #[arg(long, default_value_t = 3)]
        ft_epochs: usize,
        #[arg(long, default_value_t = 0.002)]
        ft_lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and multiply-add counts of the original and rewritten layer.
    Complexity {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        s: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        rank: usize,
    },
    /// Greedy versus NLS rank-2 fits of the 2×2×2 counterexample tensor.
    AppendixCheck,
    /// Write a synthetic blob-classification dataset.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 24)]
        size: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the untrained two-convolution toy network.
    ToyNet {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SolverFailure(_) => SOLVER,
            _ => USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

/// Rejects a directory where an output file is expected.
fn file_target(path: &Path) -> Result<&Path, Failure> {
    if path.is_dir() {
        return Err(usage(format!("--out {} is a directory", path.display())));
    }
    Ok(path)
}

fn solver_config(seed: u64, restarts: usize) -> Result<SolverConfig, Failure> {
    let cfg = SolverConfig::default().with_seed(seed).with_restarts(restarts);
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Decompose {
            model,
            layer,
            rank,
            method,
            seed,
            restarts,
            out,
        } => {
            let cfg = solver_config(seed, restarts)?;
            let net = load_network(&model)?;
            let (kernel, _) = rewritable_kernel(&net, &layer)?;
            let fit = decompose_kernel(&kernel, rank, method, &cfg)?;
            let meta = CpMeta {
                layer: Some(layer),
                method: Some(method.to_string()),
                seed: Some(seed),
                rel_error: Some(fit.rel_error),
            };
            save_cp(&fit.factors.to_decomposition(), &meta, &out)?;
            println!("rel_error {:.6e}", fit.rel_error);
        }
        Command::Rewrite {
            model,
            layer,
            factors,
            out,
        } => {
            let net = load_network(&model)?;
            let (d, _) = load_cp(&factors)?;
            let factors = KernelCpFactors::from_decomposition(&d)?;
            let rewritten = splice_factors(&net, &layer, &factors)?;
            save_network(&rewritten, &out)?;
            println!("replaced `{layer}` by a rank-{} stack", factors.rank());
        }
        Command::Finetune {
            model,
            data,
            epochs,
            lr,
            momentum,
            freeze_inserted,
            clip,
            batch_size,
            seed,
            out,
        } => {
            let cfg = TrainConfig {
                learning_rate: lr,
                momentum,
                epochs,
                batch_size,
                grad_clip_norm: clip,
                freeze_inserted,
                seed,
            };
            cfg.validate()?;
            let net = load_network(&model)?;
            let data = load_dataset(&data)?;
            let (trained, history) = train(&net, &data, None, &cfg)?;
            save_network(&trained, &out)?;
            write_history(&out.join("history.csv"), &history)?;
            if let Some(last) = history.last() {
                println!(
                    "epoch {} loss {:.6} train_acc {:.4}",
                    last.epoch, last.loss, last.train_acc
                );
            }
        }
        Command::Bench {
            model,
            layer,
            ranks,
            methods,
            data,
            seed,
            restarts,
            ft_epochs,
            ft_lr,
            batch,
            iters,
            warmup,
            out,
        } => {
            let out = file_target(&out)?;
            let fine_tune = TrainConfig {
                learning_rate: ft_lr,
                epochs: ft_epochs,
                seed,
                ..TrainConfig::fine_tune()
            };
            let cfg = BenchConfig {
                solver: solver_config(seed, restarts)?,
                fine_tune,
                timing: Some(TimingConfig { batch, warmup, iters }),
                seed,
            };
            let net = load_network(&model)?;
            let data = load_dataset(&data)?;
            let reports = rank_sweep(&net, &data, &layer, &ranks, &methods, &cfg)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| usage(format!("{}: {e}", parent.display())))?;
            }
            write_reports(out, &reports)?;
            for r in &reports {
                println!(
                    "{:<7} R={:<4} rel_error {:.4e}  acc {:.4} → {:.4} (ft {:.4})  speedup {:.2}  {}",
                    r.method, r.rank, r.rel_error, r.acc_before, r.acc_after_no_ft, r.acc_after_ft, r.speedup, r.status
                );
            }
        }
        Command::Complexity { d, s, t, rank } => {
            println!("{}", complexity(d, s, t, rank)?);
        }
        Command::AppendixCheck => appendix_check()?,
        Command::GenData {
            classes,
            per_class,
            size,
            noise,
            seed,
            out,
        } => {
            let ds = gen_synthetic(&SyntheticConfig {
                num_classes: classes,
                per_class,
                size,
                seed,
                noise,
            })?;
            save_dataset(&ds, &out)?;
            println!("{} images of {size}×{size}, {classes} classes", ds.len());
        }
        Command::ToyNet { classes, seed, out } => {
            let net = toy_network(classes, seed)?;
            save_network(&net, &out)?;
        }
    }
    Ok(())
}

/// Passes when NLS fits the tensor to relative error 1e-6 and the greedy
/// residual has Frobenius norm in [0.33, 0.37].
fn appendix_check() -> Result<(), Failure> {
    let g = appendix_tensor();
    let g_norm = frobenius_norm(&g);
    let cfg = SolverConfig::default();
    let greedy = cp_greedy(&g, 2, &cfg)?;
    let nls = cp_nls(&g, 2, &cfg)?;
    let greedy_rel = relative_error(&reconstruct(&greedy.decomposition), &g)?;
    let nls_rel = relative_error(&reconstruct(&nls.decomposition), &g)?;
    println!(
        "greedy R=2  relative error {greedy_rel:.6}  residual norm {:.6}",
        greedy_rel * g_norm
    );
    println!(
        "nls    R=2  relative error {nls_rel:.3e}  residual norm {:.3e}",
        nls_rel * g_norm
    );
    let greedy_ok = (0.33..=0.37).contains(&(greedy_rel * g_norm));
    let nls_ok = nls_rel <= 1e-6;
    if greedy_ok && nls_ok {
        println!("ok");
        Ok(())
    } else {
        Err(Failure {
            code: VERIFICATION,
            message: format!("appendix check failed (greedy in band: {greedy_ok}, nls ≤ 1e-6: {nls_ok})"),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
