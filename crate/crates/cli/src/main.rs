//! `uda-bench`: train and benchmark unsupervised domain-adaptation
//! objectives on synthetic shifts or precomputed feature CSVs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uda_bench::{
    generate_data, parse_widths, run_benchmark, run_experiment, run_gradcheck, BenchmarkSpec,
    CliError, CliResult, ConfigOverrides, ExperimentSpec, PairSpec,
};
use uda_core::losses::TransferLossKind;
use uda_core::train::ArchConfig;

#[derive(Parser)]
#[command(
    name = "uda-bench",
    version,
    about = "Benchmark harness for unsupervised domain-adaptation objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on one dataset pair and write JSON-lines metrics.
    Run(RunArgs),
    /// Sweep methods x pairs x seeds and emit a summary table.
    Benchmark(BenchmarkArgs),
    /// Check every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Materialize a synthetic dataset pair to CSV files.
    GenData(GenDataArgs),
}

#[derive(Args, Clone)]
struct HyperArgs {
    /// Training epochs (default: per-method)
    #[arg(long)]
    epochs: Option<usize>,
    /// Source batch size (default: per-method)
    #[arg(long)]
    source_batch: Option<usize>,
    /// Target batch size (default: per-method)
    #[arg(long)]
    target_batch: Option<usize>,
    /// Learning rate (default 1e-3)
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum (default 0.9)
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay (default 5e-4)
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Transfer-loss weight (base of the lambda schedule)
    #[arg(long)]
    lambda: Option<f64>,
    /// Lambda schedule: constant | inverse-epoch
    #[arg(long)]
    lambda_schedule: Option<String>,
    /// Learning-rate schedule: fixed | inverse-decay
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Gamma for the inverse-decay learning-rate schedule (default 0.1)
    #[arg(long)]
    lr_gamma: Option<f64>,
    /// Tap for the distance losses: bottleneck | logits (default: per-method)
    #[arg(long)]
    tap: Option<String>,
    /// Hidden layer widths, comma separated (default "64")
    #[arg(long)]
    hidden: Option<String>,
    /// Bottleneck width, or "none" (default 32)
    #[arg(long)]
    bottleneck: Option<String>,
    /// Discriminator hidden widths, comma separated (default "64")
    #[arg(long)]
    disc_hidden: Option<String>,
}

impl HyperArgs {
    fn overrides(&self, seed: Option<u64>) -> ConfigOverrides {
        ConfigOverrides {
            epochs: self.epochs,
            source_batch: self.source_batch,
            target_batch: self.target_batch,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            lambda_schedule: self.lambda_schedule.clone(),
            lr_schedule: self.lr_schedule.clone(),
            lr_gamma: self.lr_gamma,
            seed,
            tap: self.tap.clone(),
        }
    }

    fn arch(&self) -> CliResult<ArchConfig> {
        let mut arch = ArchConfig::default();
        if let Some(h) = &self.hidden {
            arch.hidden = parse_widths(h)?;
        }
        if let Some(b) = &self.bottleneck {
            let widths = parse_widths(b)?;
            arch.bottleneck = match widths.len() {
                0 => None,
                1 => Some(widths[0]),
                _ => {
                    return Err(CliError::Usage(
                        "bottleneck takes one width or 'none'".into(),
                    ))
                }
            };
        }
        if let Some(d) = &self.disc_hidden {
            arch.disc_hidden = parse_widths(d)?;
        }
        Ok(arch)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Method: none | coral | ddc | mmd | cdan | cdan_e
    #[arg(long)]
    method: String,
    /// Dataset pair, e.g. "moons:rotation=30,noise=0.1,per-class=200",
    /// "gauss:classes=3,dim=2,translate=2.0", "csv:source=a.csv,target=b.csv"
    #[arg(long)]
    data: String,
    /// Metrics output path (JSON lines, one record per epoch)
    #[arg(long)]
    out: PathBuf,
    /// RNG seed (default 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Write the final parameters as a versioned checkpoint
    #[arg(long)]
    save_params: Option<PathBuf>,
    #[command(flatten)]
    hp: HyperArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Comma-separated methods (default "none,coral,ddc,cdan,cdan_e")
    #[arg(long, default_value = "none,coral,ddc,cdan,cdan_e")]
    methods: String,
    /// Semicolon-separated pair specs
    #[arg(long)]
    pairs: String,
    /// Comma-separated seeds (default "1,2,3,4,5")
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Output directory for per-run metrics and the summary table
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    hp: HyperArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// RNG seed (default 0)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check (default 10)
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic pair spec (gauss:... or moons:...)
    #[arg(long)]
    data: String,
    /// RNG seed (default 0)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the CSV files
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let method: TransferLossKind = args.method.parse()?;
    let pair: PairSpec = args.data.parse()?;
    let config = args.hp.overrides(args.seed).resolve(method)?;
    let exp = ExperimentSpec {
        config,
        arch: args.hp.arch()?,
        pair,
        out: args.out.clone(),
        save_params: args.save_params.clone(),
    };
    let records = run_experiment(&exp)?;
    let last = records.last().expect("at least one epoch");
    println!(
        "wrote {} epoch records to {} (final: cls {:.4}, transfer {:.4}, src acc {:.4}, tgt acc {})",
        records.len(),
        exp.out.display(),
        last.cls_loss,
        last.transfer_loss,
        last.src_test_acc,
        last.tgt_test_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn dedup_in_order<T: PartialEq>(items: Vec<T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn cmd_benchmark(args: &BenchmarkArgs) -> CliResult<()> {
    let methods: Vec<TransferLossKind> = args
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let pairs: Vec<PairSpec> = args
        .pairs
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse())
        .collect::<CliResult<_>>()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad seed '{s}'")))
        })
        .collect::<CliResult<_>>()?;
    let (methods, pairs, seeds) = (
        dedup_in_order(methods),
        dedup_in_order(pairs),
        dedup_in_order(seeds),
    );
    let spec = BenchmarkSpec {
        methods,
        pairs,
        seeds,
        overrides: args.hp.overrides(None),
        arch: args.hp.arch()?,
        out_dir: args.out_dir.clone(),
    };
    let table = run_benchmark(&spec)?;
    print!("{}", table.render_text());
    println!(
        "summary written to {} and {}",
        spec.out_dir.join("summary.txt").display(),
        spec.out_dir.join("summary.csv").display()
    );
    if table.any_failed() {
        return Err(CliError::Runtime(
            "one or more benchmark runs failed".into(),
        ));
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let report = run_gradcheck(args.seed, args.trials)?;
    for check in &report.checks {
        println!(
            "{} {:<22} max_rel_err={:.3e}  trials={}",
            if check.passed() { "PASS" } else { "FAIL" },
            check.name,
            check.max_error,
            check.trials
        );
        if let (false, Some(worst)) = (check.passed(), &check.worst) {
            println!(
                "     worst: input {} entry ({}, {}): analytic {:.6e} vs numeric {:.6e}",
                worst.input, worst.row, worst.col, worst.analytic, worst.numeric
            );
        }
    }
    if report.passed() {
        println!(
            "gradcheck: PASS (tolerance {:.0e})",
            uda_core::gradcheck::GRAD_TOL
        );
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(
            report
                .failed_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ))
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let pair: PairSpec = args.data.parse()?;
    let (src, tgt) = generate_data(&pair, args.seed, &args.out_dir)?;
    println!("wrote {} and {}", src.display(), tgt.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code convention is 2; this tool reserves 2 for
            // runtime failures and reports usage problems as 1
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::GenData(args) => cmd_gen_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
