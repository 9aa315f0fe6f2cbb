use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recon_core::experiments::{self, ExperimentConfig, Overrides};
use recon_core::simulator::write_phantom_file;
use recon_core::ReconError;

/// Simulate, reconstruct and measure 2D PET experiments.
#[derive(Parser)]
#[command(name = "recon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm in the config and write traces and images.
    Run(Common),
    /// Compute the converged reference image used for NRMSD.
    Reference(Common),
    /// Check the config and list every problem found.
    Validate(Common),
    /// Write the config's phantom as a text phantom file.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Override the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Use the 64×64 geometry with counts scaled by the pixel ratio.
    #[arg(long)]
    desk_scale: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ReconError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            desk_scale: self.desk_scale,
        });
        Ok(cfg)
    }
}

fn exit_code(err: &ReconError) -> u8 {
    match err {
        ReconError::Validation(_) | ReconError::Config(_) => 2,
        ReconError::NumericalFailure { .. } => 3,
        ReconError::ReferenceMissing(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), ReconError> {
    match cli.command {
        Command::Validate(common) => {
            let cfg = common.load()?;
            cfg.validate()?;
            println!("{}: ok ({} algorithms)", common.config.display(), cfg.algorithms.len());
        }
        Command::Reference(common) => {
            let report = experiments::emit_reference(&common.load()?)?;
            println!(
                "reference: {} iterations, Φ = {}, written to {}",
                report.iterations,
                report.objective,
                report.checkpoint.display()
            );
        }
        Command::Run(common) => {
            let report = experiments::run_experiment(&common.load()?)?;
            for r in &report.results {
                let nrmsd = r.final_nrmsd_global.map(|v| format!("{v:.3e}")).unwrap_or("-".into());
                println!(
                    "{:<12} {:>5} iterations  Φ = {:<22} NRMSD = {:<10} {:.2} s",
                    r.label, r.n_iters, r.final_objective, nrmsd, r.elapsed_s
                );
            }
            println!("outputs in {}", report.out_dir.display());
        }
        Command::Phantom { common, out } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let phantom = experiments::load_phantom(&cfg, &cfg.geometry.resolve())?;
            if let Some(dir) = out.parent().filter(|d| d != &Path::new("")) {
                std::fs::create_dir_all(dir)?;
            }
            write_phantom_file(&phantom, &out)?;
            println!("{} written to {}", phantom.label, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
