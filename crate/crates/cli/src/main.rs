//! Command-line front door for the FP8 quantization toolkit.
//!
//! Subcommands: `calibrate`, `quantize`, `run`, `compare`, `inspect-codes`.
//! Every command is deterministic given its flags and `--seed`. Errors are
//! printed to stderr as a JSON object and the process exits nonzero.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fp8quant",
    version,
    about = "Post-training FP8 quantization toolkit",
    long_about = "Calibrate, quantize and run linear-layer models with emulated FP8 arithmetic."
)]
struct Cli {
    /// Seed for all randomness (stochastic rounding).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print extra progress detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure activation/weight maxabs statistics over a dataset.
    Calibrate(commands::CalibrateArgs),
    /// Run the quantization recipe and write a quantized model directory.
    Quantize(commands::QuantizeArgs),
    /// Execute a quantized model on an input batch.
    Run(commands::RunArgs),
    /// Evaluate every candidate config and print a degradation table.
    Compare(commands::CompareArgs),
    /// Print the full 256-entry code table of a format.
    InspectCodes(commands::InspectCodesArgs),
}

fn main() {
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        // A failed pool build only means the global pool was already set.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let ctx = commands::Ctx { seed: cli.seed, verbose: cli.verbose };
    let result = match cli.command {
        Command::Calibrate(args) => commands::calibrate(args, &ctx),
        Command::Quantize(args) => commands::quantize(args, &ctx),
        Command::Run(args) => commands::run(args, &ctx),
        Command::Compare(args) => commands::compare(args, &ctx),
        Command::InspectCodes(args) => commands::inspect_codes(args, &ctx),
    };

    if let Err(e) = result {
        let kind = e
            .downcast_ref::<fp8quant::Error>()
            .map(error_kind)
            .unwrap_or("error");
        let payload = serde_json::json!({ "kind": kind, "error": format!("{e:#}") });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn error_kind(e: &fp8quant::Error) -> &'static str {
    use fp8quant::Error::*;
    match e {
        ShapeMismatch(_) => "shape_mismatch",
        ChannelMismatch { .. } => "channel_mismatch",
        NonPositiveScale(_) => "non_positive_scale",
        EmptyTensor(_) => "empty_tensor",
        UnsupportedDtype { .. } => "unsupported_dtype",
        UnknownFormat(_) => "unknown_format",
        InvalidConfig(_) => "invalid_config",
        MissingStats(_) => "missing_stats",
        InvalidManifest(_) => "invalid_manifest",
        Io { .. } => "io",
        Json { .. } => "json",
    }
}
