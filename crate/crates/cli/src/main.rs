//! Command-line surface for the cyclegraph pipeline.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 IO or format error,
//! 3 numerics error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use cyclegraph_core::dataset::{generate_dataset, load_dataset, DatasetSpec, Split};
use cyclegraph_core::encoding::WindSpec;
use cyclegraph_core::error::{Error, Result};
use cyclegraph_core::gifenc::export_gif;
use cyclegraph_core::imageio::{load_frame_dir, Image, Mask, NormalMap};
use cyclegraph_core::loopfind::{extract_loop, find_loop};
use cyclegraph_core::model::{load_checkpoint, CycleNet};
use cyclegraph_core::reshade::Reshader;
use cyclegraph_core::trainer::{evaluate, gradient_check_tiny, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cyclegraph",
    about = "Cyclic wind-conditioned normal-map animation pipeline",
    version
)]
struct Cli {
    /// Emit a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural windfield dataset.
    GenData {
        /// Number of sequences.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        /// Loop period T in frames.
        #[arg(long, default_value_t = 30)]
        period: u32,
    },
    /// Train on a generated dataset.
    Train {
        /// Training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, report and loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the metrics report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        harmonics: usize,
    },
    /// Animate a still image into a looping cinemagraph.
    Animate {
        #[arg(long)]
        image: PathBuf,
        /// Normal map of the input image (PNG, standard codec).
        #[arg(long)]
        normals: PathBuf,
        /// Region mask (8-bit gray, >127 inside).
        #[arg(long)]
        mask: PathBuf,
        /// Wind direction "x,y" (renormalized; zero rejected).
        #[arg(long)]
        wind: String,
        #[arg(long)]
        ckpt: PathBuf,
        /// Loop period in frames.
        #[arg(long, default_value_t = 150)]
        period: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Detect the best loop in a directory of PNG frames.
    Loopfind {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 2)]
        p_min: usize,
        #[arg(long, default_value_t = 60)]
        p_max: usize,
        /// Extract the loop into this directory.
        #[arg(long)]
        extract_out: Option<PathBuf>,
        /// Crossfade length K for the extraction.
        #[arg(long, default_value_t = 0)]
        crossfade: usize,
    },
    /// Finite-difference gradient check on the tiny model.
    GradCheck {
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
}

fn parse_wind(text: &str) -> Result<WindSpec> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Validation(format!(
            "wind must be \"x,y\", got \"{}\"",
            text
        )));
    }
    let x: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad wind component \"{}\"", parts[0])))?;
    let y: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad wind component \"{}\"", parts[1])))?;
    WindSpec::from_unnormalized(x, y)
}

fn parse_split(text: &str) -> Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Validation(format!(
            "split must be train or test, got \"{}\"",
            other
        ))),
    }
}

fn run(command: Command, wants_json: bool) -> Result<serde_json::Value> {
    match command {
        Command::GenData {
            n,
            seed,
            out,
            width,
            height,
            period,
        } => {
            let spec = DatasetSpec {
                count: n,
                width,
                height,
                period,
                seed,
            };
            let manifest = generate_dataset(&spec, &out)?;
            Ok(json!({
                "command": "gen-data",
                "status": "ok",
                "out": out,
                "sequences": manifest.sequences.len(),
                "period": manifest.period,
            }))
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let train_set = load_dataset(&data, Some(Split::Train))?;
            let report = train(&train_set, &cfg, &out)?;
            // evaluate on the held-out split when one exists
            let eval_json = match load_dataset(&data, Some(Split::Test)) {
                Ok(test_set) if !test_set.sequences.is_empty() => {
                    let (params, config) = load_checkpoint(&out.join("checkpoint.ckpt"))?;
                    let net = CycleNet { config, params };
                    let eval = evaluate(&net, &test_set, Split::Test, cfg.harmonics)?;
                    let path = out.join("eval.json");
                    std::fs::write(
                        &path,
                        serde_json::to_string_pretty(&eval)
                            .map_err(|e| Error::Format(format!("eval encode: {}", e)))?,
                    )
                    .map_err(|e| Error::io(&path, e))?;
                    Some(serde_json::to_value(&eval).unwrap_or_default())
                }
                _ => None,
            };
            Ok(json!({
                "command": "train",
                "status": "ok",
                "checkpoint": report.checkpoint_path,
                "final_loss": report.loss_curve.last(),
                "steps": report.loss_curve.len(),
                "wall_clock_sec": report.wall_clock_sec,
                "eval": eval_json,
            }))
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            harmonics,
        } => {
            let split = parse_split(&split)?;
            let (params, config) = load_checkpoint(&ckpt)?;
            let net = CycleNet { config, params };
            let dataset = load_dataset(&data, Some(split))?;
            let report = evaluate(&net, &dataset, split, harmonics)?;
            let value = serde_json::to_value(&report)
                .map_err(|e| Error::Format(format!("report encode: {}", e)))?;
            if let Some(out) = out {
                std::fs::write(
                    &out,
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| Error::Format(format!("report encode: {}", e)))?,
                )
                .map_err(|e| Error::io(&out, e))?;
                let csv_path = out.with_extension("csv");
                std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            }
            Ok(json!({
                "command": "eval",
                "status": "ok",
                "masked_mae": report.masked_mae,
                "metrics": value.get("metrics"),
            }))
        }
        Command::Animate {
            image,
            normals,
            mask,
            wind,
            ckpt,
            period,
            out,
            fps,
        } => {
            let wind = parse_wind(&wind)?;
            let image = Image::load(&image)?;
            let anchor = NormalMap::load(&normals)?;
            let mask = Mask::load(&mask)?;
            let (params, config) = load_checkpoint(&ckpt)?;
            let net = CycleNet { config, params };
            let harmonics = (net.config.code_dim - 2) / 2;
            let reshader = Reshader::new(&net, &image, &anchor, &mask, wind, period, harmonics)?;
            let frames = reshader.animate()?;
            frames.save_frames(&out)?;
            let gif_path = out.join("out.gif");
            export_gif(&frames.frames, &gif_path, fps)?;
            Ok(json!({
                "command": "animate",
                "status": "ok",
                "frames": frames.frames.len(),
                "out": out,
                "gif": gif_path,
                "fit_rms_residual": reshader.fit.rms_residual,
                "fit_degenerate": reshader.fit.degenerate,
            }))
        }
        Command::Loopfind {
            frames,
            p_min,
            p_max,
            extract_out,
            crossfade,
        } => {
            let images = load_frame_dir(&frames)?;
            let spec = find_loop(&images, p_min, p_max)?;
            if let Some(dir) = &extract_out {
                let looped = extract_loop(&images, &spec, crossfade)?;
                looped.save_frames(dir)?;
            }
            Ok(json!({
                "command": "loopfind",
                "status": "ok",
                "start": spec.start,
                "period": spec.period,
                "seam_cost": spec.seam_cost,
                "extracted_to": extract_out,
            }))
        }
        Command::GradCheck { seed } => {
            let report = gradient_check_tiny(seed)?;
            let pass = report.rel_error_f32 < 1e-3 && report.rel_error_f64 < 1e-6;
            if !wants_json {
                println!(
                    "gradient check over {} parameters: max relative error {:.3e} (f32), {:.3e} (f64)",
                    report.params_checked, report.rel_error_f32, report.rel_error_f64
                );
            }
            if !pass {
                return Err(Error::Numerics(format!(
                    "gradient check failed: {:.3e} (f32, limit 1e-3), {:.3e} (f64, limit 1e-6)",
                    report.rel_error_f32, report.rel_error_f64
                )));
            }
            Ok(json!({
                "command": "grad-check",
                "status": "ok",
                "rel_error_f32": report.rel_error_f32,
                "rel_error_f64": report.rel_error_f64,
                "params_checked": report.params_checked,
            }))
        }
    }
}

fn main() -> ExitCode {
    cyclegraph_core::init_thread_pool_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // clap renders its own usage text; every parse failure maps to
            // exit 1, help/version to success
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let wants_json = cli.json;
    match run(cli.command, wants_json) {
        Ok(value) => {
            if wants_json {
                println!("{}", value);
            } else {
                let cmd = value.get("command").and_then(|v| v.as_str()).unwrap_or("");
                eprintln!("{} ok", cmd);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
