//! `zcswish`: training runs, activation curves, gradient checks, parameter
//! counts and drift diagnostics.

mod curves;
mod train;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use zcswish_core::activations::{find_centering_anchor, mean_zc_swish};
use zcswish_core::autodiff::gradcheck::{run_suite, standard_suite, GradcheckOptions};
use zcswish_core::plainnet::{group_thousands, Depth, ParamCountReport, PlainNetConfig};
use zcswish_core::probes::{self, Centering, DriftConfig, InputDist};
use zcswish_core::ActivationKind;

#[derive(Parser)]
#[command(name = "zcswish", version, about = "Activation stress-testing lab for BN-free PlainNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeds and write metrics, step logs and layer stats.
    Train(train::TrainArgs),
    /// Write activation-curve CSVs: baseline comparison and c/g/β sweeps.
    Curves(curves::CurvesArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Print the parameter count of a PlainNet.
    Params(ParamsArgs),
    /// Forward mean-shift through a freshly initialized dense stack.
    Drift(DriftArgs),
    /// Solve for the ZC-Swish anchor that zeroes the mean output on a sample.
    CenterOracle(CenterArgs),
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Relative-error tolerance for the 64-bit pass.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(clap::Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 16)]
    depth: u32,
    #[arg(long, default_value = "relu")]
    activation: ActivationKind,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    /// Exit nonzero unless the total equals this value.
    #[arg(long)]
    expect: Option<usize>,
    /// Exit nonzero unless the activation-parameter count equals this value.
    #[arg(long)]
    expect_activation: Option<usize>,
    /// Print per-layer counts.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenteringArg {
    Init,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Normal,
    Zeros,
}

#[derive(clap::Args)]
struct DriftArgs {
    #[arg(long, default_value = "swish")]
    activation: ActivationKind,
    #[arg(long, default_value_t = 16)]
    depth: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 2048)]
    samples: usize,
    #[arg(long, value_enum, default_value = "normal")]
    input: InputArg,
    /// Drop the dense-layer biases.
    #[arg(long)]
    no_bias: bool,
    /// ZC-Swish anchors: initial values, or solved per layer.
    #[arg(long, value_enum, default_value = "init")]
    centering: CenteringArg,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Also write per-unit means to `<out>.channels.csv`.
    #[arg(long)]
    per_channel: bool,
    /// CSV destination (`layer,mean,std,activation,seed`); stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CenterArgs {
    /// Newline-separated sample values; a Gaussian sample is drawn if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Effective slope β (not the raw parameter).
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Curves(args) => curves::run(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Params(args) => params(args),
        Command::Drift(args) => drift(args),
        Command::CenterOracle(args) => center_oracle(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let opts = GradcheckOptions::default();
    let r64 = run_suite(&standard_suite::<f64>(args.seed), args.tol, &opts)?;
    let r32 = run_suite(&standard_suite::<f32>(args.seed), f64::INFINITY, &opts)?;
    println!("{:<24} {:>12} {:>12}  status", "op", "f64 err", "f32 err");
    let mut failed = Vec::new();
    for (a, b) in r64.iter().zip(&r32) {
        let status = if a.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e} {:>12.3e}  {status}", a.name, a.max_rel_error, b.max_rel_error);
        if !a.passed {
            failed.push(a.name);
        }
    }
    if failed.is_empty() {
        println!("all {} ops pass at {:e}", r64.len(), args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn params(args: ParamsArgs) -> Result<ExitCode> {
    let depth = Depth::try_from(args.depth)?;
    let cfg = PlainNetConfig::new(depth, args.activation).with_width_divisor(args.width_divisor);
    let report = ParamCountReport::for_config(&cfg)?;
    println!(
        "depth {} {} width/{}",
        depth, args.activation, args.width_divisor
    );
    if args.verbose {
        println!("{report}");
    } else {
        println!("  total       {:>12}", group_thousands(report.total));
        println!("  act. params {:>12}", group_thousands(report.activation_params));
    }
    if report.activation_params > 0 {
        let base = ParamCountReport::for_config(&PlainNetConfig {
            activation: ActivationKind::Relu,
            ..cfg.clone()
        })?;
        println!("  baseline    {:>12}", group_thousands(base.total));
        println!("  overhead    {:>11.3}%", 100.0 * report.overhead());
    }
    let mut ok = true;
    if let Some(e) = args.expect {
        if e != report.total {
            println!("mismatch: total {} != expected {}", report.total, e);
            ok = false;
        }
    }
    if let Some(e) = args.expect_activation {
        if e != report.activation_params {
            println!("mismatch: activation params {} != expected {}", report.activation_params, e);
            ok = false;
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn drift(args: DriftArgs) -> Result<ExitCode> {
    let cfg = DriftConfig {
        activation: args.activation,
        depth: args.depth,
        width: args.width,
        samples: args.samples,
        seed: args.seed,
        input: match args.input {
            InputArg::Normal => InputDist::StandardNormal,
            InputArg::Zeros => InputDist::Zeros,
        },
        bias: !args.no_bias,
        centering: match args.centering {
            CenteringArg::Init => Centering::Init,
            CenteringArg::Oracle => Centering::Oracle { tol: args.tol },
        },
        per_channel: args.per_channel,
    };
    let report = probes::drift_experiment(&cfg)?;
    let mut csv_out = csv_writer(args.out.as_ref())?;
    csv_out.write_record(["layer", "mean", "std", "activation", "seed"])?;
    for l in &report.layers {
        csv_out.serialize((l.layer, l.mean, l.std, report.activation.slug(), report.seed))?;
    }
    csv_out.flush()?;
    if let (true, Some(out)) = (args.per_channel, args.out.as_ref()) {
        let path = out.with_extension("channels.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["layer", "unit", "mean"])?;
        for l in &report.layers {
            for (u, m) in l.channel_means.iter().flatten().enumerate() {
                w.serialize((l.layer, u, m))?;
            }
        }
        w.flush()?;
    }
    eprintln!(
        "{} depth {} seed {}: final |mean| {:.6e}, |mean| non-decreasing: {}, spearman: {}",
        report.activation,
        args.depth,
        report.seed,
        report.final_abs_mean(),
        report.abs_mean_nondecreasing,
        report.spearman.map_or("n/a".to_string(), |s| format!("{s:.4}")),
    );
    if matches!(args.centering, CenteringArg::Oracle) && args.activation == ActivationKind::ZcSwish {
        let anchors: Vec<String> = report
            .layers
            .iter()
            .filter_map(|l| l.anchor)
            .map(|c| format!("{c:.4}"))
            .collect();
        eprintln!("anchors: {}", anchors.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_writer(out: Option<&PathBuf>) -> Result<csv::Writer<Box<dyn std::io::Write>>> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn center_oracle(args: CenterArgs) -> Result<ExitCode> {
    let sample: Vec<f64> = match &args.input {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .split_whitespace()
            .map(|t| t.parse::<f64>().with_context(|| format!("bad sample value `{t}`")))
            .collect::<Result<_>>()?,
        None => probes::gaussian_sample(args.samples, args.seed),
    };
    if sample.is_empty() {
        bail!("empty sample");
    }
    let c = find_centering_anchor(&sample, args.beta, args.tol)?;
    let residual = mean_zc_swish(&sample, c, args.beta);
    let out = serde_json::json!({
        "c": c,
        "beta": args.beta,
        "residual_mean": residual,
        "mean_at_zero": mean_zc_swish(&sample, 0.0, args.beta),
        "samples": sample.len(),
        "tol": args.tol,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}
