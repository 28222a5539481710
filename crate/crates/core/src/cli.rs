//! Command-line front end.
//!
//! Exit codes: 0 success, 2 I/O or malformed input, 3 incompatible models,
//! 4 missing merger sidecar. With `--json`, standard output carries only
//! JSON; diagnostics always go to standard error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{alignment_report, sparsity_report};
use crate::error::Error;
use crate::lora::{read_lora, read_lora_detailed, write_lora};
use crate::zip::{self, direct_merge, scale_merged_style, zip_merge, MergerVectors, OptimizerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_MISSING_SIDECAR: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "zipmerge", version, about = "Inspect, analyze and merge LoRA adapter files")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the layers, shapes, ranks, alphas and metadata of an adapter file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Sparsity or column-alignment diagnostics.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Merge a content adapter with a style adapter.
    Merge(MergeArgs),
    /// Re-apply a merge with the style side scaled by `--ws`.
    ScaleStyle(ScaleStyleArgs),
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Magnitude histogram and norm retained after percentile pruning.
    Sparsity {
        path: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![80.0, 90.0])]
        percentiles: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Mean |cosine| between index-paired columns of two adapters.
    Alignment {
        content: PathBuf,
        style: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Zip,
    Direct,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    pub content: PathBuf,
    pub style: PathBuf,
    /// Output file (alternatively `-o`).
    pub out: Option<PathBuf>,
    #[arg(short = 'o', long = "out", conflicts_with = "out")]
    pub out_flag: Option<PathBuf>,
    #[arg(short, long, value_enum, default_value_t = Mode::Zip)]
    pub mode: Mode,
    /// Content weight for direct merges.
    #[arg(long, default_value_t = 1.0)]
    pub wc: f64,
    /// Style weight for direct merges.
    #[arg(long, default_value_t = 1.0)]
    pub ws: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
    /// Print the merge report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ScaleStyleArgs {
    pub merged: PathBuf,
    /// Output file (alternatively `-o`).
    pub out: Option<PathBuf>,
    #[arg(short = 'o', long = "out", conflicts_with = "out")]
    pub out_flag: Option<PathBuf>,
    #[arg(long)]
    pub ws: f64,
    /// Merger-vector file; defaults to `<merged>.mergers.safetensors`.
    #[arg(long)]
    pub mergers: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

/// Failure carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::EmptyOverlap | Error::ShapeMismatch { .. } => EXIT_INCOMPATIBLE,
            _ => EXIT_IO,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::EmptyOverlap | Error::ShapeMismatch { .. }) => EXIT_INCOMPATIBLE,
            _ => EXIT_IO,
        };
        Self { code, error }
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Appends `suffix` to the full file name: `out.safetensors` →
/// `out.safetensors.report.json`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub const REPORT_SUFFIX: &str = ".report.json";
pub const MERGERS_SUFFIX: &str = ".mergers.safetensors";

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).context("serializing JSON output")?;
    println!("{text}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn output_path(positional: Option<PathBuf>, flag: Option<PathBuf>) -> std::result::Result<PathBuf, CliError> {
    positional.or(flag).ok_or_else(|| CliError {
        code: EXIT_IO,
        error: anyhow::anyhow!("an output path is required (positional or -o/--out)"),
    })
}

#[derive(Serialize)]
struct LayerListing {
    rows: usize,
    cols: usize,
    rank: usize,
    alpha: f32,
}

#[derive(Serialize)]
struct Listing {
    layers: BTreeMap<String, LayerListing>,
    metadata: BTreeMap<String, String>,
    skipped: Vec<String>,
}

fn cmd_inspect(path: &Path, json: bool) -> CliResult {
    let (model, skipped) = read_lora_detailed(path)?;
    let listing = Listing {
        layers: model
            .layers
            .iter()
            .map(|(k, l)| {
                (
                    k.clone(),
                    LayerListing {
                        rows: l.rows(),
                        cols: l.cols(),
                        rank: l.rank(),
                        alpha: l.alpha(),
                    },
                )
            })
            .collect(),
        metadata: model.metadata,
        skipped,
    };
    if json {
        return print_json(&listing);
    }
    let n = listing.layers.len();
    println!("{n} layer{}", if n == 1 { "" } else { "s" });
    if n > 0 {
        let width = listing.layers.keys().map(String::len).max().unwrap_or(0).max(5);
        println!("{:<width$}  {:>11}  {:>5}  {:>8}", "layer", "shape", "rank", "alpha");
        for (key, l) in &listing.layers {
            let shape = format!("{}×{}", l.rows, l.cols);
            println!("{key:<width$}  {shape:>11}  {:>5}  {:>8}", l.rank, l.alpha);
        }
    }
    if !listing.metadata.is_empty() {
        println!("metadata:");
        for (k, v) in &listing.metadata {
            println!("  {k} = {v}");
        }
    }
    for name in &listing.skipped {
        println!("skipped: {name}");
    }
    Ok(())
}

fn cmd_sparsity(path: &Path, percentiles: &[f64], json: bool) -> CliResult {
    let model = read_lora(path)?;
    let report = sparsity_report(&model, percentiles)?;
    if json {
        return print_json(&report);
    }
    println!("{} layer{}", report.layers.len(), if report.layers.len() == 1 { "" } else { "s" });
    for (key, layer) in &report.layers {
        let stats: Vec<String> = layer
            .percentiles
            .iter()
            .map(|p| format!("p{}: threshold {:.4e}, norm retained {:.4}", p.percentile, p.threshold, p.norm_retained))
            .collect();
        println!("{key} ({}×{}): {}", layer.rows, layer.cols, stats.join("; "));
    }
    Ok(())
}

fn cmd_alignment(content: &Path, style: &Path, json: bool) -> CliResult {
    let report = alignment_report(&read_lora(content)?, &read_lora(style)?)?;
    if json {
        return print_json(&report);
    }
    let width = report.layers.keys().map(String::len).max().unwrap_or(0).max(5);
    println!("{:<width$}  {:>10}  {:>8}", "layer", "mean|cos|", "skipped");
    for (key, layer) in &report.layers {
        println!(
            "{key:<width$}  {:>10.6}  {:>4}/{:<4}",
            layer.mean_abs_cosine, layer.skipped_columns, layer.columns
        );
    }
    for (label, keys) in [
        ("only in first", &report.content_only),
        ("only in second", &report.style_only),
        ("shape mismatch", &report.shape_mismatched),
    ] {
        if !keys.is_empty() {
            println!("{label}: {}", keys.join(", "));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DirectReport<'a> {
    method: &'static str,
    w_c: f64,
    w_s: f64,
    content_digest: &'a str,
    style_digest: &'a str,
    layers: Vec<&'a str>,
    content_only: Vec<String>,
    style_only: Vec<String>,
}

fn cmd_merge(args: MergeArgs) -> CliResult {
    let out = output_path(args.out, args.out_flag)?;
    let content = read_lora(&args.content)?;
    let style = read_lora(&args.style)?;
    let started = Instant::now();
    let report_path = sidecar_path(&out, REPORT_SUFFIX);
    match args.mode {
        Mode::Direct => {
            let merged = direct_merge(&content, &style, args.wc, args.ws)?;
            let pairing = zip::pair_layers(&content, &style)?;
            let report = DirectReport {
                method: "direct",
                w_c: args.wc,
                w_s: args.ws,
                content_digest: &merged.model.metadata["zipmerge.content_digest"],
                style_digest: &merged.model.metadata["zipmerge.style_digest"],
                layers: merged.deltas.keys().map(String::as_str).collect(),
                content_only: pairing.content_only,
                style_only: pairing.style_only,
            };
            let text = serde_json::to_string_pretty(&report).context("serializing report")?;
            write_lora(&merged.model, &out)?;
            write_text(&report_path, &text)?;
            if args.json {
                println!("{text}");
            } else {
                println!(
                    "direct merge (w_c = {}, w_s = {}): {} merged layer(s) → {}",
                    args.wc,
                    args.ws,
                    merged.deltas.len(),
                    out.display()
                );
            }
        }
        Mode::Zip => {
            let config = OptimizerConfig {
                lambda: args.lambda,
                max_steps: args.max_steps,
                seed: args.seed,
                probes_per_layer: args.probes,
                ..OptimizerConfig::default()
            };
            let merged = zip_merge(&content, &style, &config)?;
            let text = merged.report.to_json();
            write_lora(&merged.model, &out)?;
            write_text(&report_path, &text)?;
            merged.mergers.write(&sidecar_path(&out, MERGERS_SUFFIX))?;
            let r = &merged.report;
            if args.json {
                println!("{text}");
            } else {
                println!(
                    "zip merge: {} layer(s), {} converged → {}",
                    r.layers.len(),
                    r.converged_layers,
                    out.display()
                );
                for (key, l) in &r.layers {
                    println!(
                        "  {key}: steps {:>3}{} cosine {:.2e} loss {:.4e} → {:.4e} residuals c {:.4} s {:.4} (direct {:.4} / {:.4})",
                        l.steps,
                        if l.converged { " " } else { "*" },
                        l.final_merger_cosine,
                        l.initial_loss,
                        l.final_loss,
                        l.content_residual,
                        l.style_residual,
                        l.direct_content_residual,
                        l.direct_style_residual
                    );
                }
            }
            for key in &r.layers.iter().filter(|(_, l)| !l.converged).map(|(k, _)| k.as_str()).collect::<Vec<_>>() {
                log::warn!("layer {key} stopped at max-steps before reaching the cosine threshold");
            }
        }
    }
    eprintln!("merge finished in {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_scale_style(args: ScaleStyleArgs) -> CliResult {
    let out = output_path(args.out, args.out_flag)?;
    let sidecar = args
        .mergers
        .unwrap_or_else(|| sidecar_path(&args.merged, MERGERS_SUFFIX));
    if !sidecar.exists() {
        return Err(CliError {
            code: EXIT_MISSING_SIDECAR,
            error: anyhow::anyhow!(
                "merger-vector sidecar {} not found; it is written next to the output of \
                 `zipmerge merge -m zip`, or pass its location with --mergers",
                sidecar.display()
            ),
        });
    }
    let merged = read_lora(&args.merged)?;
    let mergers = MergerVectors::read(&sidecar)?;
    let scaled = scale_merged_style(&merged, &mergers, args.ws)?;
    write_lora(&scaled, &out)?;
    if args.json {
        #[derive(Serialize)]
        struct Summary<'a> {
            output: &'a Path,
            w_s: f64,
            layers: usize,
        }
        print_json(&Summary {
            output: &out,
            w_s: args.ws,
            layers: scaled.len(),
        })?;
    } else {
        println!("style scaled by {} → {}", args.ws, out.display());
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Inspect { path, json } => cmd_inspect(&path, json),
        Command::Analyze(Analyze::Sparsity { path, percentiles, json }) => cmd_sparsity(&path, &percentiles, json),
        Command::Analyze(Analyze::Alignment { content, style, json }) => cmd_alignment(&content, &style, json),
        Command::Merge(args) => cmd_merge(args),
        Command::ScaleStyle(args) => cmd_scale_style(args),
    }
}

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    }
}
