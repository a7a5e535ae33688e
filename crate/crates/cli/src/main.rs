use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use vlfuse_core::data::gen_dataset;
use vlfuse_core::flops::{flops, flops_with_bench};
use vlfuse_core::gradcheck::{run_gradcheck, GradcheckConfig};
use vlfuse_core::harness::{
    ablate, drop_heatmap, encoder_seed, env_seed, load_checkpoint, run_experiment_full, save_checkpoint,
    write_heatmap, AblationAxis, ExperimentConfig,
};
use vlfuse_core::io::{read_json, save_tensor, write_json};
use vlfuse_core::train::VisionPipeline;
use vlfuse_core::Error;

/// Gradient tolerance for `gradcheck`.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vlfuse", version, about = "Parameter-free vision-language fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact FLOP counts of standard and parameter-free cross-attention.
    Flops {
        #[arg(long = "L", alias = "l")]
        l: u64,
        #[arg(long = "N", alias = "n")]
        n: u64,
        #[arg(long = "d")]
        d: u64,
        /// Also time both kernels (median of 11 calls).
        #[arg(long)]
        bench: bool,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic fusion gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Train one configuration and write a checkpoint plus reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Sweep one ablation axis.
    Ablate {
        /// projection, placement, pooling, alpha, beta or gamma
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/ablate")]
        out: PathBuf,
    },
    /// Drop-frequency grids of a trained checkpoint on its test split.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test samples; defaults to the whole split.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the multiscale prompt of one generated image.
    DumpPrompt {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/prompt")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.with_env_seed()
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Flops { l, n, d, bench, json } => {
            let report = if bench {
                flops_with_bench(l, n, d, env_seed()?.unwrap_or(0))?
            } else {
                flops(l, n, d)?
            };
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.table());
            }
        }
        Command::Gradcheck { seed, trials } => {
            let cfg = GradcheckConfig {
                seed: env_seed()?.unwrap_or(seed),
                trials,
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg)?;
            print_json(&report)?;
            let worst = report.max_rel_err();
            if !report.passed(GRAD_TOL) {
                return Err(Error::Config(format!(
                    "gradient check failed: max relative error {worst:e} exceeds {GRAD_TOL:e}"
                )));
            }
            eprintln!("gradcheck passed: {} trials, max relative error {worst:.3e}", report.trials.len());
        }
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let run = run_experiment_full(&cfg, "train")?;
            save_checkpoint(&out.join("checkpoint"), &run)?;
            write_json(&out.join("report.json"), &run.report)?;
            let md = run.report.markdown();
            std::fs::write(out.join("report.md"), &md).map_err(|e| io_err(&out, e))?;
            if let Some(h) = &run.report.heatmap {
                write_heatmap(&out.join("heatmap"), h)?;
            }
            print!("{md}");
        }
        Command::Ablate { axis, config, out } => {
            let axis = AblationAxis::parse(&axis)?;
            let cfg = load_config(config.as_deref())?;
            let result = ablate(axis, &cfg);
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write_json(&out.join(format!("{}.json", axis.name())), &result)?;
            let md = result.markdown();
            std::fs::write(out.join(format!("{}.md", axis.name())), &md).map_err(|e| io_err(&out, e))?;
            print!("{md}");
        }
        Command::Heatmap { checkpoint, samples, out } => {
            let (_, model, vision, data) = load_checkpoint(&checkpoint)?;
            let k = samples.unwrap_or(data.test.len()).min(data.test.len());
            let h = drop_heatmap(&model, &vision, &data.vocab, &data.test[..k])?;
            let out = out.unwrap_or_else(|| checkpoint.join("heatmap"));
            write_heatmap(&out, &h)?;
            print_json(&json!({
                "out": out,
                "samples": h.samples,
                "gamma": h.gamma,
                "mean_frequency": h.mean_frequency,
                "expected_mean": h.expected_mean,
                "query_top_decile_rate": h.query_top_decile_rate,
                "grid_means": h.grids.iter().map(|g| json!({"scale": g.scale, "mean": g.mean()})).collect::<Vec<_>>(),
            }))?;
        }
        Command::DumpPrompt { seed, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if env_seed()?.is_none() {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let data = gen_dataset(cfg.seed, 0, 1, cfg.data.colors)?;
            let sample = &data.test[0];
            let vision = VisionPipeline::new(
                cfg.data.colors,
                cfg.model.d_vis,
                cfg.model.prompt.clone(),
                encoder_seed(cfg.seed),
            )?;
            let img = vision.encode(&sample.image)?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            save_tensor(&out.join("prompt.admt"), &img.prompt.features)?;
            save_tensor(&out.join("cls.admt"), &img.cls)?;
            let sidecar = json!({
                "seed": cfg.seed,
                "shape": img.prompt.features.shape(),
                "prompt": img.prompt.metadata(),
                "image": sample.image,
                "query": {"row": sample.row, "col": sample.col},
                "answer": sample.answer,
            });
            write_json(&out.join("prompt.json"), &sidecar)?;
            print_json(&json!({
                "out": out,
                "rows": img.prompt.len(),
                "scales": cfg.model.prompt.scales,
            }))?;
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
