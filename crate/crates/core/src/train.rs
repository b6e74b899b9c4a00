//! Full training objective, staged optimization schedule and evaluation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::appearance::random_view_rotation;
use crate::articulation::{PoseParams, SkinningLoss};
use crate::config::{Augmentation, Config, LossWeights};
use crate::dataset::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::geometry::{quat_mul, Quat};
use crate::knn::{KnnGraph, DEFAULT_K};
use crate::losses::{
    loss_aiap_cov, loss_aiap_pos, loss_l1, loss_mask, loss_perceptual, perceptual_plugin,
    PerceptualLoss,
};
use crate::metrics::{mask_iou, psnr, ssim};
use crate::model::{
    Avatar, BackwardStats, ForwardOptions, FrameSpec, ObservedGrads, Perturbation, PoseSource,
};
use crate::params::{ParamClass, StepSettings};
use crate::render::{Framebuffer, Image};
use crate::scene::{densify_and_prune, scene_extent, DensifyReport, DensifyStats, GaussianSet};
use crate::synth::{posed_vertices, scattered_count};

/// Per-term loss values (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perc: f64,
    pub mask: f64,
    pub skin: f64,
    pub isopos: f64,
    pub isocov: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.perc,
            self.mask,
            self.skin,
            self.isopos,
            self.isocov,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything random about one optimization step, drawn up front.
#[derive(Debug, Clone)]
pub struct StepSample {
    /// Index into the training split (also the pose/latent row).
    pub train_index: usize,
    pub perturbation: Perturbation,
    pub skin_points: Vec<Vector3<f64>>,
    pub skin_targets: Vec<Vec<f64>>,
}

/// Objective settings for one evaluation.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub weights: &'a LossWeights,
    pub lambda_skin: f64,
    pub perceptual: &'a dyn PerceptualLoss,
    pub knn: &'a KnnGraph,
    pub nonrigid: bool,
}

/// Evaluates the full loss for a training frame and, when `with_grad`,
/// accumulates its gradient into the avatar's store.
pub fn evaluate_loss(
    avatar: &mut Avatar,
    frame: &Frame,
    sample: &StepSample,
    obj: Objective,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<BackwardStats>)> {
    let spec = FrameSpec {
        camera: &frame.camera,
        pose: PoseSource::Table(sample.train_index),
        latent: Some(sample.train_index),
    };
    let fwd = avatar.forward(
        spec,
        &sample.perturbation,
        ForwardOptions {
            nonrigid: obj.nonrigid,
        },
    )?;
    let fb = &fwd.framebuffer;
    let w = obj.weights;
    let (l1, g_l1) = loss_l1(&fb.rgb, &frame.image.data)?;
    let (perc, g_perc) =
        loss_perceptual(obj.perceptual, &fb.rgb_image(), &frame.image, &frame.mask)?;
    let (mask, g_mask) = loss_mask(&fb.alpha, &frame.mask.data)?;
    let skin = SkinningLoss::evaluate_at(
        &avatar.store,
        &avatar.skinning,
        &sample.skin_points,
        sample.skin_targets.clone(),
    );
    let (xc, cc) = avatar.canonical_geometry()?;
    let xo: Vec<_> = fwd.observed.iter().map(|o| o.position).collect();
    let co: Vec<_> = fwd.observed.iter().map(|o| o.covariance).collect();
    let pos = loss_aiap_pos(&xc, &xo, obj.knn);
    let cov = loss_aiap_cov(&cc, &co, obj.knn);
    let breakdown = LossBreakdown {
        l1,
        perc,
        mask,
        skin: skin.value,
        isopos: pos.value,
        isocov: cov.value,
        total: w.l1 * l1
            + w.perc * perc
            + w.mask * mask
            + obj.lambda_skin * skin.value
            + w.isopos * pos.value
            + w.isocov * cov.value,
    };
    if !with_grad {
        return Ok((breakdown, None));
    }
    let grad_rgb: Vec<f64> = g_l1
        .iter()
        .zip(&g_perc)
        .map(|(a, b)| w.l1 * a + w.perc * b)
        .collect();
    let grad_alpha: Vec<f64> = g_mask.iter().map(|g| w.mask * g).collect();
    let extra = ObservedGrads {
        positions: pos.grad_observed.iter().map(|g| g * w.isopos).collect(),
        covariances: cov.grad_observed.iter().map(|g| g * w.isocov).collect(),
    };
    let stats = avatar.backward(&fwd, &grad_rgb, &grad_alpha, &extra)?;
    skin.backward(&mut avatar.store, &avatar.skinning, obj.lambda_skin);
    let flat: Vec<f64> = pos
        .grad_canonical
        .iter()
        .flat_map(|g| (g * w.isopos).iter().copied().collect::<Vec<_>>())
        .collect();
    avatar.store.accumulate(avatar.gaussians.position, &flat);
    let cov_c: Vec<Matrix3<f64>> = cov.grad_canonical.iter().map(|g| g * w.isocov).collect();
    avatar.canonical_cov_backward(&cov_c)?;
    Ok((breakdown, Some(stats)))
}

/// Per-joint noise rotations: with probability `prob`, each local rotation
/// gets an axis-angle increment with `N(0, std)` components.
pub fn sample_pose_noise(
    joints: usize,
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Option<Vec<Quat>> {
    let apply = rng.random::<f64>() < aug.pose_noise_prob;
    if !apply || aug.pose_noise_std <= 0.0 {
        return None;
    }
    let normal = Normal::new(0.0, aug.pose_noise_std).expect("finite std");
    Some(
        (0..joints)
            .map(|_| {
                let v = Vector3::from_fn(|_, _| normal.sample(rng));
                Quat::from_rotation_vector(v)
            })
            .collect(),
    )
}

/// Training-mode pose perturbation; returns the pose unchanged when the draw
/// says no noise.
pub fn pose_noise(pose: &PoseParams, aug: &Augmentation, rng: &mut impl Rng) -> Result<PoseParams> {
    let mut out = pose.clone();
    if let Some(noise) = sample_pose_noise(pose.num_joints(), aug, rng) {
        for (q, n) in out.local_rotations.iter_mut().zip(noise) {
            *q = quat_mul(n, Quat::from_array(*q)).normalize()?.to_array();
        }
    }
    Ok(out)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub psnr: Option<f64>,
}

pub const METRICS_HEADER: &str = "iteration,l1,perc,mask,skin,isopos,isocov,total,psnr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            l.l1,
            l.perc,
            l.mask,
            l.skin,
            l.isopos,
            l.isocov,
            l.total,
            r.psnr.map(|p| p.to_string()).unwrap_or_default()
        ));
    }
    s
}

/// Training stages, each unlocked at its gate iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SkinningWarmup,
    Gaussians,
    NonRigid,
    PoseCorrection,
}

impl Stage {
    pub fn banner(self) -> &'static str {
        match self {
            Stage::SkinningWarmup => "skinning warm-up, gaussians frozen",
            Stage::Gaussians => "gaussians, color network and frame latents unfrozen",
            Stage::NonRigid => "non-rigid deformation enabled",
            Stage::PoseCorrection => "pose correction enabled",
        }
    }
}

pub enum TrainEvent<'a> {
    StageStart {
        iteration: usize,
        stage: Stage,
    },
    Densified {
        iteration: usize,
        report: DensifyReport,
    },
    /// Emitted after every optimizer step and once before the first.
    Step {
        iteration: usize,
        avatar: &'a Avatar,
        row: Option<&'a MetricsRow>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFlags {
    pub gaussians: bool,
    pub nonrigid: bool,
    pub pose: bool,
}

pub struct Trainer<'d> {
    pub config: Config,
    pub dataset: &'d Dataset,
    pub avatar: Avatar,
    pub knn: KnnGraph,
    pub stats: DensifyStats,
    pub extent: f64,
    pub metrics: Vec<MetricsRow>,
    plugin: Box<dyn PerceptualLoss>,
    rng: ChaCha8Rng,
}

/// Stream ids keep initialization, step sampling and densification draws
/// independent of each other.
const STREAM_STEPS: u64 = 1;

impl<'d> Trainer<'d> {
    pub fn new(config: Config, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let set = GaussianSet::init_from_template(
            &dataset.template,
            config.init.gaussians,
            config.model.feature_dim,
            &mut init_rng,
        )?;
        let avatar = Avatar::new(
            dataset.template.clone(),
            config.model,
            &set,
            &dataset.train_poses(),
            &mut init_rng,
        )?;
        let knn = set.knn(DEFAULT_K);
        let extent = scene_extent(&set.positions);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_STEPS);
        Ok(Self {
            plugin: perceptual_plugin(&config.perceptual)?,
            stats: DensifyStats::new(set.len()),
            config,
            dataset,
            avatar,
            knn,
            extent,
            metrics: Vec::new(),
            rng,
        })
    }

    pub fn stages_at(&self, iteration: usize) -> StageFlags {
        let s = &self.config.schedule;
        StageFlags {
            gaussians: iteration >= s.gaussian_gate,
            nonrigid: iteration >= s.nonrigid_gate,
            pose: iteration >= s.pose_gate,
        }
    }

    fn draw_sample(&mut self) -> StepSample {
        let train_index = self.rng.random_range(0..self.dataset.split.train.len());
        let joints = self.avatar.template.num_joints();
        let pose_noise = sample_pose_noise(joints, &self.config.augment, &mut self.rng);
        let view_rotation = Some(random_view_rotation(
            &mut self.rng,
            self.config.augment.view_max_deg,
        ));
        let (mut skin_points, mut skin_targets) = (Vec::new(), Vec::new());
        for _ in 0..self.config.loss.skin_samples {
            let s = self.avatar.template.sample_surface(&mut self.rng);
            skin_targets.push(self.avatar.template.interpolate_weights(&s));
            skin_points.push(s.point);
        }
        StepSample {
            train_index,
            perturbation: Perturbation {
                pose_noise,
                view_rotation,
            },
            skin_points,
            skin_targets,
        }
    }

    fn step_settings(&self, iteration: usize, class: ParamClass) -> Option<StepSettings> {
        let flags = self.stages_at(iteration);
        let lr = &self.config.lr;
        let t = iteration as f64 / self.config.schedule.iterations.max(1) as f64;
        let net = self.config.schedule.network_decay.powf(t);
        let plain = |v: f64| StepSettings {
            lr: v,
            weight_decay: 0.0,
        };
        match class {
            ParamClass::Skinning => Some(plain(lr.skinning * net)),
            ParamClass::GaussianPosition if flags.gaussians => {
                let p = lr.position_init.powf(1.0 - t) * lr.position_final.powf(t);
                Some(plain(p * self.extent))
            }
            ParamClass::GaussianScale if flags.gaussians => Some(plain(lr.scale)),
            ParamClass::GaussianRotation if flags.gaussians => Some(plain(lr.rotation)),
            ParamClass::GaussianOpacity if flags.gaussians => Some(plain(lr.opacity)),
            ParamClass::GaussianFeature if flags.gaussians => Some(plain(lr.feature)),
            ParamClass::Color if flags.gaussians => Some(plain(lr.network * net)),
            ParamClass::FrameLatent if flags.gaussians => Some(StepSettings {
                lr: lr.latent,
                weight_decay: lr.latent_weight_decay,
            }),
            ParamClass::NonRigid | ParamClass::HashGrid if flags.nonrigid => {
                Some(plain(lr.network * net))
            }
            ParamClass::Pose if flags.pose => Some(plain(lr.pose)),
            _ => None,
        }
    }

    fn non_finite(&self, iteration: usize, what: &str) -> Error {
        let a = &self.avatar;
        let g = &a.gaussians;
        let n = a.num_gaussians();
        let mut bad = Vec::new();
        for i in 0..n {
            let rows = [
                (g.position, 3),
                (g.log_scale, 3),
                (g.rotation, 4),
                (g.opacity, 1),
                (g.feature, g.feature_dim),
            ];
            let broken = rows.iter().any(|&(id, w)| {
                a.store.value(id)[i * w..(i + 1) * w]
                    .iter()
                    .chain(&a.store.grad(id)[i * w..(i + 1) * w])
                    .any(|v| !v.is_finite())
            });
            if broken {
                bad.push(i);
            }
        }
        Error::NonFinite {
            iteration,
            detail: format!("{what}; offending gaussians {bad:?}"),
        }
    }

    /// One optimizer step at `iteration`.
    pub fn step(&mut self, iteration: usize) -> Result<(LossBreakdown, Option<DensifyReport>)> {
        let flags = self.stages_at(iteration);
        let sample = self.draw_sample();
        let frame = &self.dataset.frames[self.dataset.split.train[sample.train_index]];
        self.avatar.store.zero_grad();
        let obj = Objective {
            weights: &self.config.loss,
            lambda_skin: self.config.loss.skin_at(iteration),
            perceptual: self.plugin.as_ref(),
            knn: &self.knn,
            nonrigid: flags.nonrigid,
        };
        let (loss, stats) = evaluate_loss(&mut self.avatar, frame, &sample, obj, true)?;
        if !loss.is_finite() {
            return Err(self.non_finite(iteration, &format!("loss {loss:?}")));
        }
        if self
            .avatar
            .store
            .iter()
            .any(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(self.non_finite(iteration, "non-finite gradient"));
        }
        if !self.config.lr.train_pose_scale {
            let (id, w, col) = (
                self.avatar.poses.id,
                crate::model::PoseTable::row_width(self.avatar.poses.joints),
                self.avatar.poses.scale_column(),
            );
            for row in self.avatar.store.grad_mut(id).chunks_exact_mut(w) {
                row[col] = 0.0;
            }
        }
        let adam = self.config.lr.adam();
        let settings: Vec<Option<StepSettings>> = self
            .avatar
            .store
            .iter()
            .map(|(_, p)| self.step_settings(iteration, p.class))
            .collect();
        let mut k = 0;
        self.avatar.store.adam_step(&adam, |_| {
            k += 1;
            settings[k - 1]
        });

        let mut report = None;
        if flags.gaussians {
            let st = stats.expect("gradient pass yields stats");
            self.stats.accumulate(&st.view_grad_norm, &st.visible);
            let d = &self.config.densify;
            let stop = (d.stop_fraction * self.config.schedule.iterations as f64) as usize;
            let since = iteration - self.config.schedule.gaussian_gate;
            if d.interval > 0 && since > 0 && since.is_multiple_of(d.interval) && iteration < stop {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ iteration as u64);
                rng.set_stream(2);
                let r = densify_and_prune(
                    &mut self.avatar.store,
                    &self.avatar.gaussians,
                    &self.stats,
                    d,
                    self.extent,
                    &mut rng,
                )?;
                let n = self.avatar.num_gaussians();
                self.stats.reset(n);
                self.knn = self
                    .avatar
                    .gaussians
                    .snapshot(&self.avatar.store)
                    .knn(DEFAULT_K);
                report = Some(r);
            }
        }
        Ok((loss, report))
    }

    /// Runs the full schedule, reporting progress through `observer`.
    pub fn run(&mut self, mut observer: impl FnMut(TrainEvent)) -> Result<()> {
        let total = self.config.schedule.iterations;
        observer(TrainEvent::Step {
            iteration: 0,
            avatar: &self.avatar,
            row: None,
        });
        let gates = [
            (0, Stage::SkinningWarmup),
            (self.config.schedule.gaussian_gate, Stage::Gaussians),
            (self.config.schedule.nonrigid_gate, Stage::NonRigid),
            (self.config.schedule.pose_gate, Stage::PoseCorrection),
        ];
        for it in 0..total {
            for (g, stage) in gates {
                if g == it {
                    observer(TrainEvent::StageStart {
                        iteration: it,
                        stage,
                    });
                }
            }
            let (loss, report) = self.step(it)?;
            if let Some(report) = report {
                observer(TrainEvent::Densified {
                    iteration: it,
                    report,
                });
            }
            let interval = self.config.schedule.eval_interval;
            let eval_now = (interval > 0 && (it + 1) % interval == 0) || it + 1 == total;
            let psnr = if eval_now {
                Some(self.heldout_psnr()?)
            } else {
                None
            };
            self.metrics.push(MetricsRow {
                iteration: it,
                loss,
                psnr,
            });
            observer(TrainEvent::Step {
                iteration: it + 1,
                avatar: &self.avatar,
                row: self.metrics.last(),
            });
        }
        Ok(())
    }

    /// PSNR on the first held-out frame (the first training frame when the
    /// split has none).
    pub fn heldout_psnr(&self) -> Result<f64> {
        let score = match self.dataset.split.heldout.first() {
            Some(&i) => score_frame(&self.avatar, &self.dataset.frames[i], None, true)?,
            None => score_frame(
                &self.avatar,
                &self.dataset.frames[self.dataset.split.train[0]],
                Some(0),
                true,
            )?,
        };
        Ok(score.psnr)
    }
}

/// Image and mask agreement for one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
}

/// Renders a dataset frame. `train_index` selects the learned pose/latent
/// row; `None` uses the frame's stored pose and the fallback latent.
pub fn render_frame(
    avatar: &Avatar,
    frame: &Frame,
    train_index: Option<usize>,
    nonrigid: bool,
) -> Result<Framebuffer> {
    let pose = match train_index {
        Some(k) => PoseSource::Table(k),
        None => PoseSource::Explicit(&frame.pose),
    };
    avatar.render(
        FrameSpec {
            camera: &frame.camera,
            pose,
            latent: train_index,
        },
        nonrigid,
    )
}

pub fn score_frame(
    avatar: &Avatar,
    frame: &Frame,
    train_index: Option<usize>,
    nonrigid: bool,
) -> Result<FrameScore> {
    let fb = render_frame(avatar, frame, train_index, nonrigid)?;
    score_framebuffer(&fb, frame)
}

pub fn score_framebuffer(fb: &Framebuffer, frame: &Frame) -> Result<FrameScore> {
    let img: Image = fb.rgb_image();
    Ok(FrameScore {
        psnr: psnr(&img, &frame.image)?,
        ssim: ssim(&img, &frame.image)?,
        iou: mask_iou(&fb.alpha, &frame.mask.data),
    })
}

/// Scores every training frame (learned rows) and every held-out frame.
pub fn evaluate_dataset(
    avatar: &Avatar,
    dataset: &Dataset,
    nonrigid: bool,
) -> Result<(Vec<FrameScore>, Vec<FrameScore>)> {
    let train = dataset
        .split
        .train
        .iter()
        .enumerate()
        .map(|(k, &i)| score_frame(avatar, &dataset.frames[i], Some(k), nonrigid))
        .collect::<Result<Vec<_>>>()?;
    let held = dataset
        .split
        .heldout
        .iter()
        .map(|&i| score_frame(avatar, &dataset.frames[i], None, nonrigid))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, held))
}

pub fn mean_score(scores: &[FrameScore]) -> FrameScore {
    let n = scores.len().max(1) as f64;
    FrameScore {
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
    }
}

/// Observed splats whose center lies more than three standard deviations
/// (largest axis) away from the template surface posed like `frame`.
pub fn scattered_splats(avatar: &Avatar, frame: &Frame, nonrigid: bool) -> Result<usize> {
    let fwd = avatar.forward(
        FrameSpec {
            camera: &frame.camera,
            pose: PoseSource::Explicit(&frame.pose),
            latent: None,
        },
        &Perturbation::default(),
        ForwardOptions { nonrigid },
    )?;
    let verts = posed_vertices(&avatar.template, &frame.pose)?;
    let sigma: Vec<f64> = fwd
        .scene
        .covariances
        .iter()
        .map(|c| c.symmetric_eigenvalues().max().max(0.0).sqrt())
        .collect();
    Ok(scattered_count(
        &avatar.template,
        &verts,
        &fwd.scene.positions,
        &sigma,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skipped_noise_draw_leaves_pose_unchanged() {
        let aug = Augmentation {
            pose_noise_prob: 0.0,
            ..Augmentation::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = crate::synth::bend_pose(3, 40.0);
        assert_eq!(pose_noise(&pose, &aug, &mut rng).unwrap(), pose);
    }

    #[test]
    fn noise_components_have_the_configured_spread() {
        let aug = Augmentation {
            pose_noise_prob: 1.0,
            ..Augmentation::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut samples = Vec::new();
        while samples.len() < 100_000 {
            for q in sample_pose_noise(4, &aug, &mut rng).unwrap() {
                // Independent inverse: rotation vector from the quaternion.
                let v = Vector3::new(q.x, q.y, q.z);
                let s = v.norm();
                let angle = 2.0 * s.atan2(q.w);
                if s > 0.0 {
                    samples.extend((v * (angle / s)).iter().copied());
                }
            }
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn noisy_poses_stay_unit() {
        let aug = Augmentation {
            pose_noise_prob: 1.0,
            pose_noise_std: 0.5,
            ..Augmentation::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = crate::synth::bend_pose(3, 70.0);
        for _ in 0..100 {
            let p = pose_noise(&pose, &aug, &mut rng).unwrap();
            assert_ne!(p, pose);
            for q in &p.local_rotations {
                assert!((Quat::from_array(*q).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_probability_is_respected() {
        let aug = Augmentation::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..20_000)
            .filter(|_| sample_pose_noise(2, &aug, &mut rng).is_some())
            .count();
        assert!((hits as f64 / 20_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn metrics_csv_has_fixed_columns() {
        let rows = [
            MetricsRow {
                iteration: 0,
                loss: LossBreakdown::default(),
                psnr: None,
            },
            MetricsRow {
                iteration: 1,
                loss: LossBreakdown::default(),
                psnr: Some(31.5),
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,0,0,0,0,0,0,0,");
        assert!(lines[2].ends_with(",31.5"));
    }
}
