use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gsavatar::articulation::PoseParams;
use gsavatar::checkpoint::Checkpoint;
use gsavatar::config::Config;
use gsavatar::dataset::Dataset;
use gsavatar::gradcheck::{gradcheck, GradcheckOptions};
use gsavatar::model::{Avatar, FrameSpec, PoseSource};
use gsavatar::ply::{save_ply, PlyFormat};
use gsavatar::render::Camera;
use gsavatar::synth::{bend_pose, orbit_camera, synthesize};
use gsavatar::train::{evaluate_dataset, mean_score, metrics_csv, FrameScore, TrainEvent, Trainer};
use gsavatar::{Error, Result};

/// CPU differentiable gaussian splatting for skeleton-driven avatars.
///
/// Set GSAVATAR_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "gsavatar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated dataset.
    Synth {
        /// TOML config (defaults apply to missing keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit an avatar; writes checkpoint.gsav, metrics.csv and gaussians.ply.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `synth` (or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the number of iterations.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render every (pose, camera) pair to PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of poses.
        #[arg(long)]
        poses: PathBuf,
        /// JSON array of cameras.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable the non-rigid deformation.
        #[arg(long)]
        no_nonrigid: bool,
    },
    /// Render a motion clip from one camera.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array of poses; defaults to a bend sweep up to the configured maximum and back.
        #[arg(long)]
        clip: Option<PathBuf>,
        /// JSON array of cameras; the first is used. Defaults to the frontal orbit camera.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Frames of the default sweep.
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long)]
        no_nonrigid: bool,
    },
    /// PSNR / SSIM / mask IoU table over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        no_nonrigid: bool,
    },
    /// Finite-difference audit of every parameter class on a micro-scene.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::UnknownConfigKey(_) | Error::Config(_) | Error::UnknownPlugin(_) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_avatar(path: &Path) -> Result<(Avatar, Config)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config.clone();
    Ok((ckpt.into_avatar()?, config))
}

fn render_to(
    avatar: &Avatar,
    pose: &PoseParams,
    camera: &Camera,
    nonrigid: bool,
    path: &Path,
) -> Result<()> {
    let fb = avatar.render(
        FrameSpec {
            camera,
            pose: PoseSource::Explicit(pose),
            latent: None,
        },
        nonrigid,
    )?;
    fb.rgb_image().save_png(path)
}

fn cmd_train(config: Config, data: &Path, out: &Path) -> std::result::Result<(), Failure> {
    let dataset = Dataset::load(data)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut trainer = Trainer::new(config.clone(), &dataset)?;
    println!(
        "training {} gaussians for {} iterations",
        trainer.avatar.num_gaussians(),
        config.schedule.iterations
    );
    let result = trainer.run(|event| match event {
        TrainEvent::StageStart { iteration, stage } => {
            println!("== iteration {iteration}: {} ==", stage.banner());
        }
        TrainEvent::Densified { iteration, report } => {
            println!(
                "iteration {iteration}: densify cloned {} split {} pruned {} -> {}",
                report.cloned, report.split, report.pruned, report.total
            );
        }
        TrainEvent::Step {
            iteration,
            row: Some(row),
            ..
        } => {
            if let Some(psnr) = row.psnr {
                println!(
                    "iteration {iteration}: loss {:.6} held-out psnr {psnr:.3} dB",
                    row.loss.total
                );
            }
        }
        TrainEvent::Step { .. } => {}
    });
    fs::write(out.join("metrics.csv"), metrics_csv(&trainer.metrics)).map_err(Error::from)?;
    let done = trainer.metrics.len() as u64;
    if let Err(e) = result {
        if matches!(e, Error::NonFinite { .. }) {
            let dump = out.join("nonfinite_dump.txt");
            fs::write(&dump, format!("{e}\n")).map_err(Error::from)?;
            Checkpoint::from_avatar(&trainer.avatar, &config, done)
                .save(&out.join("nonfinite.gsav"))?;
            eprintln!("diagnostic dump written to {}", dump.display());
        }
        return Err(e.into());
    }
    let ckpt = Checkpoint::from_avatar(&trainer.avatar, &config, done);
    ckpt.save(&out.join("checkpoint.gsav"))?;
    save_ply(
        &trainer.avatar.gaussians.snapshot(&trainer.avatar.store),
        &out.join("gaussians.ply"),
        PlyFormat::BinaryLittleEndian,
    )?;
    println!("checkpoint sha256 {}", ckpt.hash());
    Ok(())
}

fn print_scores(label: &str, scores: &[FrameScore], frames: &[usize]) {
    for (s, f) in scores.iter().zip(frames) {
        println!(
            "{label:<8} {f:>6} {:>9.3} {:>8.4} {:>8.4}",
            s.psnr, s.ssim, s.iou
        );
    }
    if !scores.is_empty() {
        let m = mean_score(scores);
        println!(
            "{label:<8} {:>6} {:>9.3} {:>8.4} {:>8.4}",
            "mean", m.psnr, m.ssim, m.iou
        );
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = synthesize(&cfg.synth, cfg.seed)?;
            ds.save(&out)?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            iters,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(n) = iters {
                cfg.schedule.iterations = n;
            }
            cmd_train(cfg, &data, &out)?;
        }
        Command::Render {
            checkpoint,
            poses,
            cameras,
            out,
            no_nonrigid,
        } => {
            let (avatar, _) = load_avatar(&checkpoint)?;
            let poses: Vec<PoseParams> = read_json(&poses)?;
            let cameras: Vec<Camera> = read_json(&cameras)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            for (p, pose) in poses.iter().enumerate() {
                for (c, cam) in cameras.iter().enumerate() {
                    render_to(
                        &avatar,
                        pose,
                        cam,
                        !no_nonrigid,
                        &out.join(format!("p{p:04}_c{c:04}.png")),
                    )?;
                }
            }
            println!(
                "rendered {} images to {}",
                poses.len() * cameras.len(),
                out.display()
            );
        }
        Command::Animate {
            checkpoint,
            out,
            clip,
            cameras,
            frames,
            no_nonrigid,
        } => {
            let (avatar, cfg) = load_avatar(&checkpoint)?;
            let joints = avatar.template.num_joints();
            let poses: Vec<PoseParams> = match clip {
                Some(p) => read_json(&p)?,
                None => (0..frames)
                    .map(|k| {
                        let phase = k as f64 / frames.max(2).saturating_sub(1) as f64;
                        let tri = 1.0 - (2.0 * phase - 1.0).abs();
                        bend_pose(joints, cfg.synth.max_bend_deg * tri)
                    })
                    .collect(),
            };
            let camera = match cameras {
                Some(p) => *read_json::<Vec<Camera>>(&p)?
                    .first()
                    .ok_or_else(|| Error::Dataset("camera file is empty".into()))?,
                None => orbit_camera(&cfg.synth, &avatar.template, 0.0),
            };
            fs::create_dir_all(&out).map_err(Error::from)?;
            for (k, pose) in poses.iter().enumerate() {
                render_to(
                    &avatar,
                    pose,
                    &camera,
                    !no_nonrigid,
                    &out.join(format!("frame_{k:04}.png")),
                )?;
            }
            println!("rendered {} frames to {}", poses.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            no_nonrigid,
        } => {
            let (avatar, _) = load_avatar(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let (train, held) = evaluate_dataset(&avatar, &ds, !no_nonrigid)?;
            println!(
                "{:<8} {:>6} {:>9} {:>8} {:>8}",
                "split", "frame", "psnr_db", "ssim", "iou"
            );
            print_scores("train", &train, &ds.split.train);
            print_scores("heldout", &held, &ds.split.heldout);
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let report = gradcheck(&cfg, &GradcheckOptions::default())?;
            print!("{}", report.to_table());
            if !report.passed() {
                return Err(Error::GradcheckFailed(format!(
                    "tolerance {:e} exceeded",
                    report.tolerance
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(v) = std::env::var("GSAVATAR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure {
            code: 2,
            error: Error::Config(format!(
                "GSAVATAR_THREADS must be a positive integer, got `{v}`"
            )),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 1,
            error: Error::Config(e.to_string()),
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
