use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tadtr::config::{parse_attention, RunConfig};
use tadtr::dataset::{load_split, write_synthetic, Dataset};
use tadtr::error::{io_error, Error, Result};
use tadtr::format::{load_features, save_checkpoint};
use tadtr::pipeline::{evaluate_model, flops_report, infer, load_model, query_distribution, sidecar_path, train_model};
use tadtr_core::data::SyntheticConfig;
use tadtr_core::eval::parse_threshold_grid;

#[derive(Parser)]
#[command(name = "tadtr", version, about = "Set-prediction temporal action detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid `[a:b:s]`, both ends included.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the detections of one feature file, best first.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Model config; defaults to the checkpoint's `.cfg` sidecar.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Video duration in seconds; defaults to one second per frame.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Analytic multiply-add count of one forward pass.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        attention: Option<String>,
    },
    /// Dump (query, center, length) of every prediction over a directory.
    Queries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "features-dir")]
        features_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic benchmark (features, train.json, val.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        videos: usize,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        length: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let origin = || format!("{} (--set)", path.display());
    let cwd = std::env::current_dir().map_err(io_error("."))?;
    for item in overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| Error::Config {
            origin: origin(),
            reason: format!("override `{item}` is not KEY=VALUE"),
        })?;
        cfg.set(k.trim(), v.trim(), &cwd).map_err(|reason| Error::Config {
            origin: origin(),
            reason,
        })?;
    }
    cfg.validate().map_err(|reason| Error::Config {
        origin: origin(),
        reason,
    })?;
    Ok(cfg)
}

/// The explicit config, or the sidecar written next to the checkpoint.
fn model_config(config: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    let path = config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sidecar_path(checkpoint));
    RunConfig::load(path)
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::Config {
        origin: "config".into(),
        reason: format!("`{key}` is required"),
    })
}

fn split(cfg: &RunConfig, annotations_key: &str, annotations: &Option<PathBuf>) -> Result<Dataset> {
    load_split(
        require(annotations, annotations_key)?,
        require(&cfg.data.features_dir, "data.features_dir")?,
        cfg.data.length,
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_error(path))
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let mut emit = |line: &str| {
        let _ = writeln!(stdout, "{line}");
    };
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let out = out.or_else(|| cfg.checkpoint.clone()).ok_or_else(|| Error::Config {
                origin: config.display().to_string(),
                reason: "no checkpoint path: pass --out or set paths.checkpoint".into(),
            })?;
            let train = split(&cfg, "data.train_annotations", &cfg.data.train_annotations)?;
            let val = cfg
                .data
                .val_annotations
                .as_ref()
                .map(|_| split(&cfg, "data.val_annotations", &cfg.data.val_annotations))
                .transpose()?;
            let mut log_lines = Vec::new();
            let outcome = train_model(&cfg, &train, val.as_ref(), |record| {
                let line = record.log_line();
                emit(&line);
                log_lines.push(line);
            })?;
            save_checkpoint(&outcome.model.params, &out)?;
            write_text(&sidecar_path(&out), &cfg.model_text())?;
            if let Some(report) = &outcome.snapshot {
                let text = report.to_string();
                for line in text.lines() {
                    emit(line);
                }
                if let Some(path) = &cfg.report {
                    write_text(path, &text)?;
                }
            }
            if let Some(path) = &cfg.log {
                write_text(path, &(log_lines.join("\n") + "\n"))?;
            }
            emit(&format!("checkpoint={}", out.display()));
        }
        Command::Eval {
            config,
            checkpoint,
            thresholds,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let Some(grid) = thresholds {
                cfg.thresholds = parse_threshold_grid(&grid)?;
            }
            let model = load_model(&cfg, &checkpoint)?;
            let val = split(&cfg, "data.val_annotations", &cfg.data.val_annotations)?;
            let report = evaluate_model(&model, &val, &cfg.eval_config())?;
            let text = report.to_string();
            emit(text.trim_end());
            if let Some(path) = &cfg.report {
                write_text(path, &text)?;
            }
        }
        Command::Infer {
            checkpoint,
            features,
            config,
            duration,
        } => {
            let cfg = model_config(config.as_deref(), &checkpoint)?;
            let model = load_model(&cfg, &checkpoint)?;
            let raw = load_features(&features)?;
            for row in infer(&model, &raw, cfg.data.length, duration)? {
                emit(&format!(
                    "{} {:.3} {:.3} {:.6}",
                    row.label, row.start_sec, row.end_sec, row.score
                ));
            }
        }
        Command::Flops {
            config,
            length,
            attention,
        } => {
            let mut cfg = load_config(&config, &[])?;
            if let Some(kind) = attention {
                cfg.model.attention = parse_attention(&kind).map_err(|reason| Error::Config {
                    origin: "--attention".into(),
                    reason,
                })?;
            }
            emit(flops_report(&cfg.model, length).1.trim_end());
        }
        Command::Queries {
            checkpoint,
            features_dir,
            config,
        } => {
            let cfg = model_config(config.as_deref(), &checkpoint)?;
            let model = load_model(&cfg, &checkpoint)?;
            emit("query center length video");
            for r in query_distribution(&model, &features_dir, cfg.data.length)? {
                emit(&format!("{} {:.6} {:.6} {}", r.query, r.center, r.length, r.video));
            }
        }
        Command::Synth {
            out,
            videos,
            train,
            classes,
            length,
            dim,
            sigma,
            seed,
        } => {
            let cfg = SyntheticConfig {
                num_videos: videos,
                num_classes: classes,
                length,
                feature_dim: dim,
                noise_sigma: sigma,
                seed,
                ..SyntheticConfig::default()
            };
            let layout = write_synthetic(&out, &cfg, train)?;
            emit(&format!("features_dir={}", layout.features_dir.display()));
            emit(&format!("train_annotations={}", layout.train_annotations.display()));
            emit(&format!("val_annotations={}", layout.val_annotations.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
