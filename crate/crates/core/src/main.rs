use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gamerge::bench::{self, Mode, ReportFormat, RunConfig, RunMetrics};

#[derive(Parser)]
#[command(name = "gamerge", version, about = "Geometry-aware cached token merging benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark described by a key=value config file.
    Run { config: PathBuf },
    /// Write gradient, variance, GA and label maps for every image in a directory.
    DumpMaps {
        dir: PathBuf,
        /// Output directory for the PGM rasters.
        #[arg(long, default_value = "maps")]
        out: PathBuf,
        /// Optional config file supplying model and merge settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep frame counts and modes over a synthetic or configured scene.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        frames: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "baseline,ga_merge,ga_merge_cached")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        intervals: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

fn print_summary(rows: &[RunMetrics]) {
    println!(
        "{:<16} {:>4} {:>6} {:>8} {:>7} {:>16} {:>6} {:>10} {:>10}",
        "mode", "R", "frames", "tokens", "keep", "global_flops", "plans", "total_ms", "max_dev"
    );
    for r in rows {
        println!(
            "{:<16} {:>4} {:>6} {:>8} {:>7.4} {:>16} {:>6} {:>10.2} {:>10.3e}",
            r.mode.to_string(),
            r.cache_interval.map_or("-".to_string(), |v| v.to_string()),
            r.n_frames,
            r.total_tokens,
            r.keep_ratio,
            r.global_attention_flops,
            r.plan_computations,
            r.total_ms,
            r.max_abs_dev.unwrap_or(f64::NAN),
        );
    }
}

fn run(cli: Cli) -> gamerge::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::from_file(&config)?;
            print_summary(&bench::run_benchmark(&cfg)?);
        }
        Command::DumpMaps { dir, out, config } => {
            let cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            let n = bench::dump_maps(&dir, &out, &cfg.model)?;
            println!("wrote maps for {n} frames to {}", out.display());
        }
        Command::Sweep {
            frames,
            modes,
            intervals,
            config,
            output,
            format,
            repetitions,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            cfg.frame_counts = frames;
            cfg.modes = modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<_, _>>()?;
            if let Some(intervals) = intervals {
                cfg.cache_intervals = intervals;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            if let Some(f) = format {
                cfg.format = f.parse::<ReportFormat>()?;
            } else if output
                .as_ref()
                .and_then(|p| p.extension())
                .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
            {
                cfg.format = ReportFormat::Csv;
            }
            if output.is_some() {
                cfg.output = output;
            }
            print_summary(&bench::run_benchmark(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
