use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fusedet::data::{generate_dataset, load_dataset, load_sample, GeneratorConfig, SceneType};
use fusedet::harness::{
    apply_checkpoint, curve_csv, evaluate, infer_sample, load_checkpoint, run_verification, train,
    EvalConfig, TrainConfig,
};
use fusedet::model::Detector;

#[derive(Parser)]
#[command(name = "fusedet", about = "Multimodal pedestrian detector testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic visible/thermal dataset with a manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p_day: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Upper bound on pedestrians per scene.
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        /// Background noise standard deviation.
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        /// Pedestrian height band in pixels, as MIN,MAX.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [12.0, 48.0])]
        height_band: Vec<f64>,
    },
    /// Train from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset; writes report JSON + curve CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24.0)]
        min_height: f64,
    },
    /// Run the numerical verification suites; exits nonzero on failure.
    Verify {
        #[arg(long)]
        quick: bool,
    },
    /// Run inference on one sample container; writes detections JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_detector(checkpoint: &PathBuf) -> Result<Detector> {
    let ckpt = load_checkpoint(checkpoint).context("loading checkpoint")?;
    let detector = Detector::new(0);
    apply_checkpoint(&detector, &ckpt).context("applying checkpoint")?;
    Ok(detector)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { seed, n, p_day, out, size, max_objects, noise_std, height_band } => {
            let config = GeneratorConfig {
                seed,
                p_day,
                height: size,
                width: size,
                max_objects,
                noise_std,
                height_band: (height_band[0], height_band[1]),
                ..GeneratorConfig::default()
            };
            let manifest = generate_dataset(n, &config, &out)?;
            println!("wrote {} samples to {}", manifest.len(), out.display());
        }
        Command::Train { config } => {
            let text = fs::read_to_string(&config).context("reading config")?;
            let cfg: TrainConfig = serde_json::from_str(&text).context("parsing config")?;
            let outcome = train(&cfg)?;
            println!(
                "trained {} steps; metrics -> {}; checkpoint -> {}",
                outcome.final_step, cfg.metrics, cfg.checkpoint
            );
        }
        Command::Eval { checkpoint, data, out, min_height } => {
            let detector = load_detector(&checkpoint)?;
            let samples = load_dataset(&data)?;
            let cfg = EvalConfig { min_height, ..EvalConfig::default() };
            let (report, curve) = evaluate(&detector, &samples, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            fs::write(out.join("curve.csv"), curve_csv(&curve))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Verify { quick } => {
            let checks = run_verification(quick);
            let mut failed = false;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed |= !c.passed;
            }
            return Ok(!failed);
        }
        Command::Infer { checkpoint, sample, out } => {
            let detector = load_detector(&checkpoint)?;
            let s = load_sample(&sample, SceneType::Day, 0.0)?;
            let dets = infer_sample(&detector, &s, &EvalConfig::default());
            let rows: Vec<serde_json::Value> = dets
                .iter()
                .map(|d| {
                    serde_json::json!({
                        "bbox": [d.bbox.0, d.bbox.1, d.bbox.2, d.bbox.3],
                        "score": d.score,
                    })
                })
                .collect();
            fs::write(&out, serde_json::to_string_pretty(&rows)?)?;
            println!("wrote {} detections to {}", rows.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
