//! `tta`: command-line front end for the streaming adaptation engine.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 invalid configuration,
//! 3 I/O or file format error, 4 numerical or other runtime failure.

mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use toml::Value;
use tta_core::adapter::gradcheck::{finite_difference_check, InstanceSpec};
use tta_core::engine::{calibrate, run_stream_with, RunReport};
use tta_core::features::{generate_synthetic_stream, Dataset, SyntheticSpec};
use tta_core::report::parse_stream;
use tta_core::zeroshot::TextPrototypeBank;
use tta_core::{Error, Strategy};

use config::{RunFlags, Source};

/// Error carried to `main` with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ConfigInvalid(_) | Error::InvalidSpec(_) | Error::InvalidParams(_) => 2,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::TruncatedFile { .. }
            | Error::TrailingBytes { .. }
            | Error::Manifest(_)
            | Error::Labels(_)
            | Error::MalformedRecord { .. } => 3,
            _ => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "tta", version, about = "Streaming test-time adaptation over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic embedding stream and its manifest
    Synth(SynthArgs),
    /// Zero-shot statistics over the calibration prefix, as JSON
    Calibrate(CalibrateArgs),
    /// Run the engine over a stream
    Run(RunArgs),
    /// Run once per value of one config axis and tabulate accuracy
    Sweep(SweepArgs),
    /// Summarize a JSONL record stream
    Report(ReportArgs),
    /// Finite-difference check of the residual gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    prompts_per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    modality_gap: Option<f64>,
    #[arg(long)]
    image_contrast: Option<f64>,
    #[arg(long)]
    intra_noise: Option<f64>,
    #[arg(long)]
    view_noise: Option<f64>,
    #[arg(long)]
    prompt_noise: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            classes: self.classes.unwrap_or(d.classes),
            dim: self.dim.unwrap_or(d.dim),
            per_class: self.per_class.unwrap_or(d.per_class),
            views: self.views.unwrap_or(d.views),
            prompts_per_class: self.prompts_per_class.unwrap_or(d.prompts_per_class),
            separation: self.separation.unwrap_or(d.separation),
            modality_gap: self.modality_gap.unwrap_or(d.modality_gap),
            image_contrast: self.image_contrast.unwrap_or(d.image_contrast),
            intra_noise: self.intra_noise.unwrap_or(d.intra_noise),
            view_noise: self.view_noise.unwrap_or(d.view_noise),
            prompt_noise: self.prompt_noise.unwrap_or(d.prompt_noise),
            shift: self.shift.unwrap_or(d.shift),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    calib_fraction: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    flags: RunFlags,
    /// Print the effective engine config as TOML and exit
    #[arg(long)]
    echo_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    CacheSize,
    Strategy,
    ZsInit,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: RunFlags,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated axis values (zs-init takes on/off)
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    /// Write each cell's JSONL stream into this directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSONL record stream
    input: PathBuf,
    /// Write predictions.csv and thresholds.csv into this directory
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Print the summary as JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of consecutive seeds to check
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Perturb one analytic coordinate, as INDEX:OFFSET
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn synth(args: SynthArgs) -> CliResult<u8> {
    let spec = args.spec();
    let stream = generate_synthetic_stream(&spec)?;
    let manifest = stream.write_to(&args.out)?;
    println!("{}", manifest.display());
    Ok(0)
}

fn calibrate_cmd(args: CalibrateArgs) -> CliResult<u8> {
    if !(args.calib_fraction > 0.0 && args.calib_fraction <= 1.0) {
        return Err(Failure::config("calib-fraction must be in (0, 1]"));
    }
    let dataset = Dataset::open(&args.manifest)?;
    let bank = TextPrototypeBank::build(&dataset.prompts, args.temperature)?;
    let report = calibrate(&dataset, &bank, args.calib_fraction)?;
    println!("{}", to_json(&report)?);
    Ok(0)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::internal(e.to_string()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::io(format!("{}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunOutput<'a> {
    manifest: &'a Path,
    sources: &'a std::collections::BTreeMap<String, Source>,
    #[serde(flatten)]
    report: &'a RunReport,
}

fn run(args: RunArgs) -> CliResult<u8> {
    let resolved = args.flags.resolve(None)?;
    if args.echo_config {
        print!("{}", config::echo(&resolved.engine)?);
        return Ok(0);
    }
    let manifest = resolved
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Failure::config("no manifest given (--manifest or `manifest` in the config file)"))?;
    let dataset = Dataset::open(&manifest)?;

    let to_stdout = resolved.paths.jsonl.is_none();
    let mut sink: Box<dyn Write> = match &resolved.paths.jsonl {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let dump = resolved.paths.cache_dump.clone();
    let report = run_stream_with(&dataset, &resolved.engine, &mut *sink, |engine| match &dump {
        Some(dir) => engine.dump_cache(dir, "cache"),
        None => Ok(()),
    })?;
    drop(sink);

    if let Some(path) = &resolved.paths.report {
        let out = RunOutput {
            manifest: &manifest,
            sources: &resolved.sources,
            report: &report,
        };
        let mut w = create(path)?;
        writeln!(w, "{}", to_json(&out)?).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        w.flush().map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    let text = format!(
        "{}wall clock       {:.3}s\n",
        report.summary.render(),
        report.wall_clock_secs
    );
    if to_stdout {
        eprint!("{text}");
    } else {
        print!("{text}");
    }
    Ok(0)
}

fn axis_override(axis: Axis, raw: &str) -> CliResult<(&'static str, Value)> {
    let bad = || Failure::config(format!("invalid value {raw:?} for the sweep axis"));
    Ok(match axis {
        Axis::CacheSize => ("cache_size", Value::Integer(raw.parse::<u32>().map_err(|_| bad())?.into())),
        Axis::Strategy => {
            let s: Strategy = raw.parse().map_err(|_| bad())?;
            ("strategy", Value::String(s.to_string()))
        }
        Axis::ZsInit => match raw {
            "on" | "true" => ("zs_init", Value::Boolean(true)),
            "off" | "false" => ("zs_init", Value::Boolean(false)),
            _ => return Err(bad()),
        },
    })
}

fn sweep(args: SweepArgs) -> CliResult<u8> {
    let values: Vec<String> = args
        .values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Failure::config("sweep needs at least one value"));
    }
    let overrides = values
        .iter()
        .map(|v| axis_override(args.axis, v))
        .collect::<CliResult<Vec<_>>>()?;
    let base = args.flags.resolve(None)?;
    let manifest = base
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Failure::config("no manifest given (--manifest or `manifest` in the config file)"))?;
    let dataset = Dataset::open(&manifest)?;

    let axis_name = overrides[0].0;
    println!("{:<12} {:>10} {:>14} {:>8}", axis_name, "accuracy", "cache_accuracy", "admitted");
    let mut worst = 0u8;
    for (raw, (key, value)) in values.iter().zip(overrides) {
        let cell = args
            .flags
            .resolve(Some((key, value)))
            .and_then(|r| -> CliResult<RunReport> {
                let mut sink: Box<dyn Write> = match &args.out_dir {
                    Some(dir) => Box::new(create(&dir.join(format!("{axis_name}-{raw}.jsonl")))?),
                    None => Box::new(io::sink()),
                };
                Ok(run_stream_with(&dataset, &r.engine, &mut *sink, |_| Ok(()))?)
            });
        match cell {
            Ok(rep) => {
                let pct = |x: Option<f64>| x.map_or("unavailable".to_string(), |a| format!("{:.2}%", 100.0 * a));
                println!(
                    "{:<12} {:>10} {:>14} {:>8}",
                    raw,
                    pct(rep.summary.accuracy),
                    pct(rep.summary.final_cache_accuracy),
                    rep.summary.admitted
                );
            }
            Err(f) => {
                println!("{raw:<12} FAILED: {}", f.message);
                worst = worst.max(f.code);
            }
        }
    }
    Ok(worst)
}

fn report(args: ReportArgs) -> CliResult<u8> {
    let file = File::open(&args.input).map_err(|e| Failure::io(format!("{}: {e}", args.input.display())))?;
    let parsed = parse_stream(BufReader::new(file)).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", args.input.display(), f.message);
        f
    })?;
    let summary = parsed.summary;
    if let Some(dir) = &args.csv_dir {
        let io_err = |p: &Path, e: io::Error| Failure::io(format!("{}: {e}", p.display()));
        let p = dir.join("predictions.csv");
        let mut w = create(&p)?;
        summary.predictions_csv(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&p, e))?;
        let p = dir.join("thresholds.csv");
        let mut w = create(&p)?;
        summary.thresholds_csv(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&p, e))?;
    }
    if args.json {
        println!("{}", to_json(&summary)?);
    } else {
        print!("{}", summary.render());
    }
    Ok(0)
}

fn parse_corrupt(raw: &str) -> CliResult<(usize, f64)> {
    let bad = || Failure::config(format!("--corrupt expects INDEX:OFFSET, got {raw:?}"));
    let (i, o) = raw.split_once(':').ok_or_else(bad)?;
    Ok((i.parse().map_err(|_| bad())?, o.parse().map_err(|_| bad())?))
}

fn gradcheck(args: GradcheckArgs) -> CliResult<u8> {
    let mut spec = InstanceSpec {
        classes: args.classes,
        dim: args.dim,
        views: args.views,
        ..InstanceSpec::default()
    };
    if let Some(t) = args.temperature {
        spec.temperature = t;
    }
    if let Some(l) = args.lambda {
        spec.params.lambda = l;
    }
    if let Some(t) = args.tolerance {
        spec.tolerance = t;
    }
    if let Some(s) = args.strategy {
        spec.strategy = s;
    }
    spec.corrupt = args.corrupt.as_deref().map(parse_corrupt).transpose()?;

    let mut all_passed = true;
    for seed in args.seed..args.seed + args.count.max(1) {
        let r = finite_difference_check(&spec, seed)?;
        all_passed &= r.passed;
        if args.json {
            println!("{}", serde_json::to_string(&r).map_err(|e| Failure::internal(e.to_string()))?);
        } else {
            println!(
                "seed {:<6} {}  max_rel_error {:.3e}  worst {} {}[{}] analytic {:.6e} numeric {:.6e}",
                r.seed,
                if r.passed { "PASS" } else { "FAIL" },
                r.max_rel_error,
                if r.worst.visual { "visual" } else { "text" },
                r.worst.class,
                r.worst.component,
                r.analytic,
                r.numeric
            );
        }
    }
    Ok(if all_passed { 0 } else { 1 })
}
