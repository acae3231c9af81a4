//! Implementations of the CLI subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use fp8quant::calib::StatsFile;
use fp8quant::codec::enumerate_codes;
use fp8quant::model::{
    forward_quantized, load_quantized_model, read_f32_bin, save_quantized_model, Dataset, Model,
};
use fp8quant::recipe::{
    run_calibration, run_comparison, run_recipe, RecipeConfig, RecipeResult,
};
use fp8quant::Fp8Format;

/// Global flags shared by every subcommand.
pub struct Ctx {
    pub seed: u64,
    pub verbose: u8,
}

fn parse_format(name: &str) -> Result<Fp8Format> {
    Ok(name.parse::<Fp8Format>()?)
}

/// Read a `RecipeConfig` from JSON or TOML, chosen by file extension.
fn load_recipe_config(path: &Path) -> Result<RecipeConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RecipeConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .with_context(|| format!("parsing TOML config {}", path.display()))?,
        _ => serde_json::from_str(&text)
            .with_context(|| format!("parsing JSON config {}", path.display()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Source model directory (manifest.json + weight binaries).
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration dataset directory (index.json + batch binaries).
    #[arg(long)]
    pub data: PathBuf,
    /// Output statistics file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn calibrate(args: CalibrateArgs, _ctx: &Ctx) -> Result<()> {
    let model = Model::load(&args.model)?;
    let dataset = Dataset::load(&args.data)?;
    let stats = run_calibration(&model, &dataset)?;

    println!("{:<16} {:>12} {:>12} {:>9}", "layer", "r_x", "r_w", "channels");
    for (name, s) in &stats {
        println!(
            "{:<16} {:>12.6} {:>12.6} {:>9}",
            name,
            s.r_x,
            s.r_w,
            s.r_x_per_channel.len()
        );
    }

    let file = StatsFile::from_stats(stats.iter().map(|(n, s)| (n.as_str(), s)));
    file.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct QuantizeArgs {
    /// Source model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration statistics file produced by `calibrate`.
    #[arg(long)]
    pub stats: PathBuf,
    /// Recipe config file (JSON or TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the quantized model.
    #[arg(long)]
    pub out: PathBuf,
    /// FP8 format: e4m3, e4m3_gaudi2 or e5m2.
    #[arg(long, default_value = "e4m3")]
    pub format: String,
}

pub fn quantize(args: QuantizeArgs, ctx: &Ctx) -> Result<()> {
    let fmt = parse_format(&args.format)?;
    let model = Model::load(&args.model)?;
    let stats_file = StatsFile::load(&args.stats)?;
    let recipe = load_recipe_config(&args.config)?;
    let dataset = Dataset::load(&args.data)?;

    let mut stats = std::collections::BTreeMap::new();
    for layer in &model.manifest.layers {
        stats.insert(layer.name.clone(), stats_file.layer(&layer.name)?);
    }

    let result = run_recipe(&model, &recipe, &stats, &dataset, fmt, ctx.seed)?;
    let layers = fp8quant::recipe::build_selected(&model, &recipe, &stats, &result, fmt, ctx.seed)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_quantized_model(&args.out, &layers)?;
    write_result_files(&args.out, &result)?;

    print!("{}", result.to_table());
    println!(
        "selected {} ({}); wrote {}",
        result.selected_label(),
        if result.passed { "meets threshold" } else { "FAILED threshold" },
        args.out.display()
    );
    if ctx.verbose > 0 {
        for l in &result.layers {
            println!(
                "  {:<16} cfg={:<24} weight_err={:.3e} out_err={:.3e} clipped={}",
                l.name,
                l.config.as_deref().unwrap_or("(high precision)"),
                l.report.weight_err_fro,
                l.report.output_err_rel,
                l.report.clip_count
            );
        }
    }
    Ok(())
}

fn write_result_files(dir: &Path, result: &RecipeResult) -> Result<()> {
    let json_path = dir.join("recipe_result.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(result)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let report_path = dir.join("report.txt");
    let mut report = result.to_table();
    report.push('\n');
    for l in &result.layers {
        report.push_str(&format!(
            "{:<16} config={:<24} weight_err_fro={:.6e} output_err_rel={:.6e} clip_count={} s_x={} s_w={} s_c={}\n",
            l.name,
            l.config.as_deref().unwrap_or("high_precision"),
            l.report.weight_err_fro,
            l.report.output_err_rel,
            l.report.clip_count,
            l.report.scales_used.s_x,
            l.report.scales_used.s_w,
            l.report.scales_used.s_c,
        ));
    }
    std::fs::write(&report_path, report)
        .with_context(|| format!("writing {}", report_path.display()))?;
    Ok(())
}

#[derive(Args)]
pub struct RunArgs {
    /// Quantized model directory written by `quantize`.
    #[arg(long)]
    pub model: PathBuf,
    /// Input batch: raw little-endian f32, row-major. Row count is inferred
    /// from the file size and the model's input width.
    #[arg(long)]
    pub input: PathBuf,
    /// Output tensor file (raw little-endian f32 plus a `.json` shape sidecar).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: RunArgs, _ctx: &Ctx) -> Result<()> {
    let layers = load_quantized_model(&args.model)?;
    let first = layers.first().context("quantized model has no layers")?;
    let cols = first.in_channels();

    let bytes = std::fs::metadata(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?
        .len() as usize;
    if cols == 0 || !bytes.is_multiple_of(4 * cols) {
        bail!(
            "input file {} ({} bytes) is not a whole number of {}-channel f32 rows",
            args.input.display(),
            bytes,
            cols
        );
    }
    let rows = bytes / (4 * cols);
    let x = read_f32_bin(&args.input, rows, cols)?;

    let y = forward_quantized(&layers, &x)?;
    fp8quant::model::write_f32_bin(&args.out, &y)?;
    let shape_path = args.out.with_extension("json");
    std::fs::write(
        &shape_path,
        serde_json::to_string_pretty(&serde_json::json!({ "rows": y.rows(), "cols": y.cols() }))?,
    )
    .with_context(|| format!("writing {}", shape_path.display()))?;
    println!("wrote {} ({}x{})", args.out.display(), y.rows(), y.cols());
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Source model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Recipe config listing the candidates to evaluate.
    #[arg(long)]
    pub config: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Calibration statistics file; when omitted, calibration runs on --data.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// FP8 format: e4m3, e4m3_gaudi2 or e5m2.
    #[arg(long, default_value = "e4m3")]
    pub format: String,
}

pub fn compare(args: CompareArgs, ctx: &Ctx) -> Result<()> {
    let fmt = parse_format(&args.format)?;
    let model = Model::load(&args.model)?;
    let recipe = load_recipe_config(&args.config)?;
    let dataset = Dataset::load(&args.data)?;

    let stats = match &args.stats {
        Some(path) => {
            let file = StatsFile::load(path)?;
            let mut map = std::collections::BTreeMap::new();
            for layer in &model.manifest.layers {
                map.insert(layer.name.clone(), file.layer(&layer.name)?);
            }
            map
        }
        None => run_calibration(&model, &dataset)?,
    };

    let result = run_comparison(&model, &recipe, &stats, &dataset, fmt, ctx.seed)?;
    print!("{}", result.to_table());
    println!("{}", serde_json::to_string(&result.candidates)?);
    Ok(())
}

#[derive(Args)]
pub struct InspectCodesArgs {
    /// FP8 format: e4m3, e4m3_gaudi2 or e5m2.
    #[arg(long, default_value = "e4m3")]
    pub format: String,
}

pub fn inspect_codes(args: InspectCodesArgs, _ctx: &Ctx) -> Result<()> {
    let fmt = parse_format(&args.format)?;
    println!(
        "format {fmt}: {} exponent bits, {} mantissa bits, bias {}, max finite {}",
        fmt.exp_bits(),
        fmt.mant_bits(),
        fmt.exp_bias(),
        fmt.max_finite()
    );
    println!("{:<6} {:<10} {:>22} class", "code", "bits", "value");
    for entry in enumerate_codes(fmt) {
        let class = if entry.is_nan {
            "nan"
        } else if entry.is_inf {
            "inf"
        } else if entry.is_subnormal {
            "subnormal"
        } else if entry.value == 0.0 {
            "zero"
        } else {
            "normal"
        };
        println!(
            "{:#04x} {}  {:>22} {}",
            entry.code,
            format_bits(entry.code, fmt),
            entry.value,
            class
        );
    }
    Ok(())
}

fn format_bits(code: u8, fmt: Fp8Format) -> String {
    let m = fmt.mant_bits();
    let sign = (code >> 7) & 1;
    let exp = (code & 0x7f) >> m;
    let mant = code & ((1 << m) - 1);
    format!(
        "{sign}_{exp:0>width_e$b}_{mant:0>width_m$b}",
        width_e = fmt.exp_bits() as usize,
        width_m = m as usize
    )
}
