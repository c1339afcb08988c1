//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all_groups, ToyScene, DEFAULT_TOLERANCE};
use crate::synthetic::{generate_synthetic_scene, SceneSpec};
use crate::trainer;

pub const CHECKPOINT_FILE: &str = "checkpoint.mmpi";
pub const REPORT_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "train_log.json";

#[derive(Debug, Parser)]
#[command(name = "mmpi", version, about = "Train, render and evaluate MMPI radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the checkpoint, the loss log and test metrics to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave wall-clock timings out of the metrics report.
        #[arg(long)]
        deterministic: bool,
    },
    /// Render every pose of a manifest to PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on one split and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of all gradients on a toy scene.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        coords: usize,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(config: &Path, data: &Path, out: &Path, deterministic: bool) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let dataset = SceneDataset::load(data)?;
    create_dir(out)?;
    let start = std::time::Instant::now();
    let (model, log) = trainer::train(&cfg, &dataset, |s| {
        log::info!(
            "stage {} iter {}{}: loss {:.6} (photometric {:.6})",
            s.stage,
            s.iteration,
            s.mpi.map(|m| format!(" mpi {m}")).unwrap_or_default(),
            s.terms.total,
            s.terms.photometric
        );
    })?;
    log::info!("training took {:.1}s", start.elapsed().as_secs_f64());
    checkpoint::save(&model, &cfg, &out.join(CHECKPOINT_FILE), false)?;
    let entries: Vec<serde_json::Value> = log
        .iter()
        .map(|s| {
            serde_json::json!({
                "stage": s.stage,
                "iteration": s.iteration,
                "mpi": s.mpi,
                "photometric": s.terms.photometric,
                "pt_rgb": s.terms.pt_rgb,
                "bg": s.terms.bg,
                "dist": s.terms.dist,
                "tv": s.terms.tv,
                "total": s.terms.total,
            })
        })
        .collect();
    write(&out.join(LOG_FILE), &serde_json::to_string_pretty(&entries).expect("log serializes"))?;
    if dataset.count(Split::Test) > 0 {
        let opts = trainer::eval_options(&model, &cfg);
        let report = trainer::evaluate(&model, &dataset, Split::Test, &opts, cfg.digest_hex(), deterministic)?;
        println!("test PSNR {:.3} dB, SSIM {:.4}", report.mean_psnr, report.mean_ssim);
        write(&out.join(REPORT_FILE), &report.to_json())?;
    }
    Ok(())
}

fn render(checkpoint: &Path, poses: &Path, out_dir: &Path) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint, None, false)?;
    let dataset = SceneDataset::load_poses(poses)?;
    create_dir(out_dir)?;
    let opts = trainer::eval_options(&ckpt.model, &ckpt.config);
    for (i, f) in dataset.frames.iter().enumerate() {
        let img = trainer::render_to_image(&ckpt.model, &f.camera, &opts)?;
        let stem = f
            .file_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:03}"));
        img.save_png(&out_dir.join(format!("{stem}.png")))?;
    }
    println!("rendered {} views to {}", dataset.frames.len(), out_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Split, report: &Path, deterministic: bool) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint, None, false)?;
    let dataset = SceneDataset::load(data)?;
    let opts = trainer::eval_options(&ckpt.model, &ckpt.config);
    let r = trainer::evaluate(&ckpt.model, &dataset, split, &opts, ckpt.config.digest_hex(), deterministic)?;
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(report, &r.to_json())?;
    println!("{split} PSNR {:.3} dB, SSIM {:.4} over {} views", r.mean_psnr, r.mean_ssim, r.views.len());
    Ok(())
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec = SceneSpec::load(spec)?;
    let scene = generate_synthetic_scene(&spec, seed)?;
    let manifest = scene.dataset.save(out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn gradcheck(config: &Path, coords: usize) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let mut scene = ToyScene::from_config(&cfg)?;
    let checks = check_all_groups(&mut scene, coords, DEFAULT_TOLERANCE, cfg.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{:<14} {}", format!("{:?}", c.group), c.report);
        if !c.report.passed() {
            failed.push(format!("{:?}", c.group));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            deterministic,
        } => train(&config, &data, &out, deterministic),
        Command::Render {
            checkpoint,
            poses,
            out_dir,
        } => render(&checkpoint, &poses, &out_dir),
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            deterministic,
        } => eval(&checkpoint, &data, split, &report, deterministic),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Gradcheck { config, coords } => gradcheck(&config, coords),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["mmpi", "eval", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["mmpi", "synth", "--spec", "a", "--out", "b", "--seed", "x"]).is_err());
    }

    #[test]
    fn split_flag_parses() {
        let cli = Cli::try_parse_from([
            "mmpi", "eval", "--checkpoint", "c", "--data", "d", "--split", "val", "--report", "r",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Eval { split: Split::Val, .. }));
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let err = eval(
            Path::new("/nonexistent/ckpt.mmpi"),
            Path::new("/nonexistent/m.json"),
            Split::Test,
            Path::new("/tmp/r.json"),
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.mmpi"), "{err}");
    }
}
