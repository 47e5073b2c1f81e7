use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mgi_core::inversion::DistanceKind;
use mgi_core::io::save_image;
use mgi_core::report::{round_significant, SCORE_DIGITS};
use mgi_core::selftest::run_selftest;
use mgi_core::synth::make_synthetic_pair;
use mgi_core::{run_pipeline, RunConfig};

#[derive(Parser)]
#[command(name = "mgi", version, about = "Exemplar-based translation by multiple GAN inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warp the target onto the source layout, invert it under every
    /// composing layer, and keep the lowest-FID hypothesis.
    Run(RunArgs),
    /// Write a seeded synthetic source/target pair.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side length of both images.
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Flags override config-file values, which override defaults.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Composing layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Latent codes per hypothesis.
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Softmax temperature of the correspondence warp.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    distance: Option<DistanceKind>,
    /// Downsampling factor between generator output and guide.
    #[arg(long)]
    factor: Option<usize>,
    /// Directory of reference images for FID instead of generator samples.
    #[arg(long)]
    ref_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.source.map(Some), cfg.source_path);
        set!(self.target.map(Some), cfg.target_path);
        set!(self.out, cfg.output_dir);
        set!(self.seed, cfg.master_seed);
        set!(self.layers, cfg.layers);
        set!(self.codes, cfg.code_count);
        set!(self.steps, cfg.steps);
        set!(self.alpha, cfg.warp_temperature);
        set!(self.distance, cfg.distance);
        set!(self.factor, cfg.factor);
        set!(self.ref_dir.map(Some), cfg.reference_dir);
        if cfg.source_path.is_none() || cfg.target_path.is_none() {
            bail!("--source and --target are required (on the command line or in the config file)");
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = run_pipeline(&cfg).with_context(|| {
                format!("run failed; partial outputs in {}", cfg.output_dir.display())
            })?;
            let chosen = out.chosen();
            let fid = chosen.fid_score.expect("selected hypotheses are scored");
            println!(
                "chosen layer={} fid={}",
                chosen.config.composing_layer,
                round_significant(fid, SCORE_DIGITS)
            );
        }
        Command::Synth { seed, out, size } => {
            let (source, target) = make_synthetic_pair(seed, size)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_image(&source, out.join("source.ppm"))?;
            save_image(&target, out.join("target.ppm"))?;
            println!("wrote {} and {}", out.join("source.ppm").display(), out.join("target.ppm").display());
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
