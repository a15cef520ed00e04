use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use frugal_harness::angles::{parse_angle_config, run_angle_analysis, AngleReport};
use frugal_harness::config::parse_run_config;
use frugal_harness::experiment::{metrics_csv, run_experiment, sorted_json, write_outputs, RunOptions, Summary};
use frugal_harness::memory::{parse_memory_config, run_memory, MemoryReport};
use frugal_harness::rate::{parse_rate_config, run_rate_check, RateCheck};
use frugal_harness::toy::{run_reproj_toy, ToyConfig, ToyReport};
use frugal_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "frugal", version, about = "Experiments for split state-full/state-free optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the seed (or seed list) of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Format of the report printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a run configuration and write per-seed metrics.
    Train {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Record wall-clock time in the metrics (output is then not reproducible).
        #[arg(long)]
        wall_clock: bool,
    },
    /// Projection-only quadratic with and without momentum re-projection.
    ToyReproj {
        /// Optional JSON configuration; flags override its fields.
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long)]
        gap: Option<u64>,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Principal angles between successive SVD bases versus random bases.
    Angles {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Optimizer-state float counts for a stack of transformer-shaped layers.
    Memory {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Empirical gradient norms of coordinate-wise momentum against the bound.
    RateCheck {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn summary_csv(s: &Summary) -> Result<String> {
    csv_string(
        &["seed", "final_loss", "final_grad_norm_sq", "diverged_at", "state_floats"],
        s.runs.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.final_loss.to_string(),
                r.final_grad_norm_sq.to_string(),
                opt(r.diverged_at),
                opt(r.state_floats),
            ]
        }),
    )
}

fn toy_csv(r: &ToyReport) -> Result<String> {
    let rows = r.curves.iter().flat_map(|c| {
        (0..c.steps.len()).map(move |i| {
            vec![
                c.rank.to_string(),
                serde_json::to_value(c.policy).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                c.lr.to_string(),
                c.steps[i].to_string(),
                c.mean[i].to_string(),
                c.std[i].to_string(),
            ]
        })
    });
    csv_string(&["rank", "policy", "lr", "step", "mean_loss", "std_loss"], rows)
}

fn angles_csv(r: &AngleReport) -> Result<String> {
    csv_string(
        &["bin_lo", "bin_hi", "svd_count", "random_count"],
        r.histogram
            .iter()
            .map(|b| vec![b.lo.to_string(), b.hi.to_string(), b.svd.to_string(), b.random.to_string()]),
    )
}

fn memory_csv(reports: &[MemoryReport]) -> Result<String> {
    csv_string(
        &["projection", "density", "parameters", "predicted_floats", "closed_form", "measured_floats"],
        reports.iter().map(|r| {
            vec![
                serde_json::to_value(r.projection).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                r.density.to_string(),
                r.parameters.to_string(),
                r.predicted_floats.to_string(),
                r.closed_form.to_string(),
                opt(r.measured_floats),
            ]
        }),
    )
}

fn rate_csv(r: &RateCheck) -> Result<String> {
    csv_string(
        &[
            "sampler", "alpha", "mean_grad_sq", "mean_std_error", "bound", "noise_floor",
            "noise_floor_std_error", "p_min_avg", "p_max_hat", "stepsize_ok", "within_bound",
        ],
        r.rows.iter().map(|x| {
            vec![
                x.sampler.clone(),
                x.alpha.to_string(),
                x.mean_grad_sq.to_string(),
                x.mean_std_error.to_string(),
                x.bound.to_string(),
                x.noise_floor.to_string(),
                x.noise_floor_std_error.to_string(),
                x.p_min_avg.to_string(),
                x.p_max_hat.to_string(),
                x.stepsize_ok.to_string(),
                x.within_bound.to_string(),
            ]
        }),
    )
}

fn emit(format: Format, csv: String, json: String) {
    match format {
        Format::Csv => print!("{csv}"),
        Format::Json => print!("{json}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, common, wall_clock } => {
            let mut cfg = parse_run_config(&read(&config)?)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            let out = common.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from));
            let summary = run_experiment(&cfg, RunOptions { wall_clock })?;
            if let Some(dir) = &out {
                write_outputs(&summary, dir)?;
            }
            match common.format {
                Format::Csv if summary.runs.len() == 1 => print!("{}", metrics_csv(&summary.runs[0].rows)?),
                Format::Csv => print!("{}", summary_csv(&summary)?),
                Format::Json => print!("{}", sorted_json(&summary)?),
            }
            if summary.diverged {
                return Err(HarnessError::Diverged("at least one seed diverged".into()));
            }
        }
        Command::ToyReproj { config, ranks, gap, seeds, steps, common } => {
            let mut cfg = match config {
                Some(path) => frugal_harness::config::parse_json::<ToyConfig>(&read(&path)?, "toy config")?,
                None => ToyConfig::default(),
            };
            let first = common.seed.unwrap_or(0);
            if let Some(r) = ranks {
                cfg.ranks = r;
            }
            if let Some(g) = gap {
                cfg.update_gap = g;
            }
            if let Some(n) = seeds {
                cfg.seeds = (first..first + n).collect();
            } else if common.seed.is_some() {
                let n = cfg.seeds.len() as u64;
                cfg.seeds = (first..first + n).collect();
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let report = run_reproj_toy(&cfg)?;
            let (csv, json) = (toy_csv(&report)?, sorted_json(&report)?);
            write_file(common.out.as_deref(), "toy_curves.csv", &csv)?;
            write_file(common.out.as_deref(), "toy_report.json", &json)?;
            for v in &report.verdicts {
                eprintln!("rank {}: re-projection never worse after burn-in at lr {:?}", v.rank, v.passing_lrs);
            }
            emit(common.format, csv, json);
        }
        Command::Angles { config, common } => {
            let mut cfg = parse_angle_config(&read(&config)?)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let report = run_angle_analysis(&cfg)?;
            let (csv, json) = (angles_csv(&report)?, sorted_json(&report)?);
            write_file(common.out.as_deref(), "angles_histogram.csv", &csv)?;
            write_file(common.out.as_deref(), "angles_report.json", &json)?;
            eprintln!(
                "svd min-max cosine {:.4}, random {:.4}, one-sided p = {:.3e}",
                report.svd_min_max_cosine, report.random_min_max_cosine, report.welch.p_value
            );
            emit(common.format, csv, json);
        }
        Command::Memory { config, common } => {
            let mut cfg = parse_memory_config(&read(&config)?)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let reports = run_memory(&cfg)?;
            let (csv, json) = (memory_csv(&reports)?, sorted_json(&reports)?);
            write_file(common.out.as_deref(), "memory.csv", &csv)?;
            write_file(common.out.as_deref(), "memory.json", &json)?;
            emit(common.format, csv, json);
        }
        Command::RateCheck { config, common } => {
            let mut cfg = parse_rate_config(&read(&config)?)?;
            if let Some(seed) = common.seed {
                cfg.first_seed = seed;
            }
            let report = run_rate_check(&cfg)?;
            let (csv, json) = (rate_csv(&report)?, sorted_json(&report)?);
            write_file(common.out.as_deref(), "rate_check.csv", &csv)?;
            write_file(common.out.as_deref(), "rate_check.json", &json)?;
            eprintln!(
                "within bound: {}, noise floor monotone in alpha: {}",
                report.all_within_bound(),
                report.floors_monotone()
            );
            emit(common.format, csv, json);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
