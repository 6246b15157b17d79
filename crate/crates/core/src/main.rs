use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cpgamp::experiment::{execute, exit_code, ExperimentConfig, Mode};
use cpgamp::Result;

/// Adaptive CP-GAMP experiments.
///
/// Settings come from an optional TOML config; flags override it. Every run
/// writes manifest.toml to the output directory, and passing it back with
/// --config reproduces the run.
#[derive(Debug, Parser)]
#[command(name = "cpgamp", version)]
struct Cli {
    /// TOML experiment config (a manifest from an earlier run works too).
    #[arg(long)]
    config: Option<PathBuf>,
    /// synth, inpaint, oracle-check or sweep.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed list: `1..10` (inclusive) or `1,4,7`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Tensor shape, e.g. `30x30x30`.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<ShapeArg>,
    /// True CP rank of synthetic data.
    #[arg(long)]
    rank: Option<usize>,
    /// Initial column count of the adaptive model.
    #[arg(long)]
    rank_init: Option<usize>,
    /// SNR in dB; `inf` for noiseless.
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Fraction of observed entries.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Convergence tolerance on the relative change per sweep.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    /// Disable the EM updates (plain CP-GAMP).
    #[arg(long)]
    no_em: bool,
    /// Independent runs in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input image for inpaint (8-bit RGB PNG or PPM).
    #[arg(long)]
    image: Option<PathBuf>,
    /// oracle-check: number of random inputs.
    #[arg(long)]
    samples: Option<usize>,
    /// oracle-check: deviation bound.
    #[arg(long)]
    tolerance: Option<f64>,
    /// sweep: comma-separated observation ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// sweep: comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snrs_db: Option<Vec<f64>>,
    /// Write a per-iteration diagnostics CSV.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

#[derive(Debug, Clone)]
struct ShapeArg(Vec<usize>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let bad = |_| format!("invalid seed list `{s}`");
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(bad)?;
        let hi: u64 = b.trim().trim_start_matches('=').parse().map_err(bad)?;
        if hi < lo {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((lo..=hi).collect()));
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(bad))
        .collect::<std::result::Result<_, _>>()
        .map(SeedList)
}

fn parse_shape(s: &str) -> std::result::Result<ShapeArg, String> {
    s.split(['x', 'X', ','])
        .map(|t| t.trim().parse().map_err(|_| format!("invalid shape `{s}`")))
        .collect::<std::result::Result<_, _>>()
        .map(ShapeArg)
}

fn build_config(cli: Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = cli.mode {
        c.mode = v;
    }
    if let Some(v) = cli.seed {
        c.seed = v;
        c.seeds.clear();
    }
    if let Some(v) = cli.seeds {
        c.seeds = v.0;
    }
    if let Some(v) = cli.shape {
        c.shape = v.0;
    }
    if let Some(v) = cli.rank {
        c.true_rank = v;
    }
    if let Some(v) = cli.rank_init {
        c.initial_rank = Some(v);
    }
    if let Some(v) = cli.snr_db {
        c.snr_db = v;
    }
    if let Some(v) = cli.ratio {
        c.observation_ratio = v;
    }
    if let Some(v) = cli.max_iters {
        c.gamp.max_iterations = v;
    }
    if let Some(v) = cli.tol {
        c.gamp.convergence_tol = v;
    }
    if let Some(v) = cli.damping {
        c.gamp.damping = v;
    }
    if let Some(v) = cli.prune_threshold {
        c.em.prune_threshold = v;
    }
    if cli.no_em {
        c.em.em_enabled = false;
    }
    if let Some(v) = cli.jobs {
        c.jobs = v;
    }
    if let Some(v) = cli.out {
        c.out = v;
    }
    if let Some(v) = cli.image {
        c.image = Some(v);
    }
    if let Some(v) = cli.samples {
        c.samples = v;
    }
    if let Some(v) = cli.tolerance {
        c.tolerance = v;
    }
    if let Some(v) = cli.ratios {
        c.sweep_ratios = v;
    }
    if let Some(v) = cli.snrs_db {
        c.sweep_snr_db = v;
    }
    if cli.diagnostics {
        c.diagnostics = true;
    }
    Ok(c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(cli).and_then(|c| execute(&c, &mut std::io::stdout().lock()));
    match result {
        Ok(status) => ExitCode::from(status.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
