//! End-to-end gradient audit: analytic gradients of the total loss against
//! central finite differences on a frozen micro-scene.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::appearance::random_view_rotation;
use crate::articulation::PoseParams;
use crate::config::Config;
use crate::dataset::Frame;
use crate::deformation::{BackwardFaults, HashGridConfig, NonRigidConfig};
use crate::error::Result;
use crate::geometry::{logit, Quat};
use crate::knn::{knn_build, KnnGraph, DEFAULT_K};
use crate::losses::{perceptual_plugin, PerceptualLoss};
use crate::model::{Avatar, ModelConfig, Perturbation};
use crate::params::{ParamClass, ParamId};
use crate::render::{Camera, Image};
use crate::scene::GaussianSet;
use crate::synth::bend_pose;
use crate::template::CapsuleChain;
use crate::train::{evaluate_loss, Objective, StepSample};

pub const MICRO_GAUSSIANS: usize = 5;
pub const MICRO_SIZE: usize = 8;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Entries per class with the largest analytic magnitude.
    pub top_entries: usize,
    /// Additional uniformly drawn entries per class.
    pub random_entries: usize,
    /// Step is `eps * max(1, |theta|)`.
    pub eps: f64,
    /// Relative errors use `max(|a|, |fd|, floor)` as denominator.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub faults: BackwardFaults,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            top_entries: 6,
            random_entries: 2,
            eps: 1e-6,
            floor: 1e-6,
            tolerance: DEFAULT_TOLERANCE,
            seed: 7,
            faults: BackwardFaults::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub classes: Vec<ClassReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.classes
            .iter()
            .all(|c| c.checked > 0 && c.max_rel_err < self.tolerance)
    }

    pub fn class(&self, c: ParamClass) -> Option<&ClassReport> {
        self.classes.iter().find(|r| r.class == c)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>8} {:>12}  status\n",
            "class", "entries", "max_rel_err"
        );
        for c in &self.classes {
            let ok = c.checked > 0 && c.max_rel_err < self.tolerance;
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>12.3e}  {}",
                c.class.name(),
                c.checked,
                c.max_rel_err,
                if ok { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// The frozen scene: model, one target frame and every random draw.
pub struct MicroScene {
    pub avatar: Avatar,
    pub frame: Frame,
    pub sample: StepSample,
    pub knn: KnnGraph,
}

pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        skinning_width: 16,
        skinning_depth: 2,
        color_hidden: 16,
        nonrigid: NonRigidConfig {
            depth: 2,
            width: 16,
            pose_dim: 8,
            feature_dim: 16,
        },
        hashgrid: HashGridConfig {
            levels: 4,
            features_per_level: 2,
            log2_table_size: 8,
            base_resolution: 4,
            finest_resolution: 32,
        },
        ..ModelConfig::default()
    }
}

/// Five randomized gaussians on a two-bone chain seen in an 8x8 image, with
/// non-trivial values in every tensor so that every gradient path is live.
pub fn micro_scene(seed: u64) -> Result<MicroScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = CapsuleChain::default().build()?;
    let cfg = micro_model_config();
    let mut set =
        GaussianSet::init_from_template(&template, MICRO_GAUSSIANS, cfg.feature_dim, &mut rng)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..set.len() {
        set.log_scales[i] = Vector3::from_fn(|_, _| rng.random_range(0.12f64..0.3).ln());
        set.rotations[i] = Quat::new(
            1.0 + rng.random_range(-0.3..0.3),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        set.opacity_logits[i] = logit(rng.random_range(0.35..0.8));
    }
    for f in &mut set.features {
        *f = 0.5 * normal.sample(&mut rng);
    }
    let mut pose = bend_pose(2, 30.0);
    pose.translation = [0.05, -0.03, 0.02];
    pose.global_rotation = Quat::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), 0.2).to_array();
    let mut avatar = Avatar::new(template, cfg, &set, &[pose], &mut rng)?;
    let randomize = |avatar: &mut Avatar, id: ParamId, std: f64, rng: &mut ChaCha8Rng| {
        for v in avatar.store.value_mut(id) {
            *v = std * normal.sample(rng);
        }
    };
    let last = avatar.nonrigid.mlp.layers.last().expect("output layer");
    let (w, b) = (last.weight, last.bias);
    randomize(&mut avatar, w, 0.05, &mut rng);
    randomize(&mut avatar, b, 0.02, &mut rng);
    let table = avatar.nonrigid.grid.table;
    randomize(&mut avatar, table, 0.3, &mut rng);
    let latents = avatar.latents.id;
    randomize(&mut avatar, latents, 0.3, &mut rng);

    let center = avatar.template.bbox.center();
    let camera = Camera::look_at(
        center + Vector3::new(0.3, 0.1, -3.0),
        center,
        Vector3::y(),
        MICRO_SIZE,
        MICRO_SIZE,
        9.0,
    );
    let px = MICRO_SIZE * MICRO_SIZE;
    let image = Image::new(
        MICRO_SIZE,
        MICRO_SIZE,
        3,
        (0..3 * px).map(|_| rng.random()).collect(),
    )?;
    let mask = Image::new(
        MICRO_SIZE,
        MICRO_SIZE,
        1,
        (0..px)
            .map(|i| {
                let (x, y) = (i % MICRO_SIZE, i / MICRO_SIZE);
                if (2..6).contains(&x) && (1..7).contains(&y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    let frame = Frame {
        image,
        mask,
        camera,
        pose: PoseParams::identity(2),
    };
    let noise = (0..2)
        .map(|_| Quat::from_rotation_vector(Vector3::from_fn(|_, _| 0.1 * normal.sample(&mut rng))))
        .collect();
    let (mut skin_points, mut skin_targets) = (Vec::new(), Vec::new());
    for _ in 0..16 {
        let s = avatar.template.sample_surface(&mut rng);
        skin_targets.push(avatar.template.interpolate_weights(&s));
        skin_points.push(s.point);
    }
    let sample = StepSample {
        train_index: 0,
        perturbation: Perturbation {
            pose_noise: Some(noise),
            view_rotation: Some(random_view_rotation(&mut rng, 45.0)),
        },
        skin_points,
        skin_targets,
    };
    let knn = knn_build(&set.positions, DEFAULT_K.min(MICRO_GAUSSIANS - 1));
    Ok(MicroScene {
        avatar,
        frame,
        sample,
        knn,
    })
}

/// Audits every registered parameter class of the micro-scene.
pub fn gradcheck(config: &Config, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let MicroScene {
        mut avatar,
        frame,
        sample,
        knn,
    } = micro_scene(opts.seed)?;
    avatar.faults = opts.faults;
    let plugin: Box<dyn PerceptualLoss> = perceptual_plugin(&config.perceptual)?;
    let weights = config.loss;
    let obj = Objective {
        weights: &weights,
        lambda_skin: weights.skin_early,
        perceptual: plugin.as_ref(),
        knn: &knn,
        nonrigid: true,
    };
    let avatar = &mut avatar;
    avatar.store.zero_grad();
    evaluate_loss(avatar, &frame, &sample, obj, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut classes = Vec::new();
    for class in avatar.store.classes() {
        let mut entries: Vec<(ParamId, usize, f64)> = avatar
            .store
            .iter()
            .filter(|(_, p)| p.class == class)
            .flat_map(|(id, p)| p.grad.iter().enumerate().map(move |(k, g)| (id, k, *g)))
            .collect();
        entries.sort_by(|a, b| {
            b.2.abs()
                .total_cmp(&a.2.abs())
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        let mut chosen: Vec<(ParamId, usize, f64)> =
            entries.iter().take(opts.top_entries).copied().collect();
        let rest = entries.len().saturating_sub(opts.top_entries);
        for _ in 0..opts.random_entries.min(rest) {
            chosen.push(entries[opts.top_entries + rng.random_range(0..rest)]);
        }
        let mut report = ClassReport {
            class,
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for (id, k, analytic) in chosen {
            let orig = avatar.store.value(id)[k];
            let h = opts.eps * orig.abs().max(1.0);
            avatar.store.value_mut(id)[k] = orig + h;
            let plus = evaluate_loss(avatar, &frame, &sample, obj, false)?.0.total;
            avatar.store.value_mut(id)[k] = orig - h;
            let minus = evaluate_loss(avatar, &frame, &sample, obj, false)?.0.total;
            avatar.store.value_mut(id)[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel_err =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel_err >= report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(EntryCheck {
                    tensor: avatar.store.param(id).name.clone(),
                    index: k,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
        classes.push(report);
    }
    Ok(GradcheckReport {
        classes,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_scene_is_visible_and_every_class_has_gradient() {
        let mut s = micro_scene(7).unwrap();
        let cfg = Config::default();
        let plugin = perceptual_plugin(&cfg.perceptual).unwrap();
        let obj = Objective {
            weights: &cfg.loss,
            lambda_skin: cfg.loss.skin_early,
            perceptual: plugin.as_ref(),
            knn: &s.knn,
            nonrigid: true,
        };
        s.avatar.store.zero_grad();
        let (_, stats) = evaluate_loss(&mut s.avatar, &s.frame, &s.sample, obj, true).unwrap();
        assert!(stats.unwrap().visible.iter().all(|v| *v));
        for class in s.avatar.store.classes() {
            let mass: f64 = s
                .avatar
                .store
                .iter()
                .filter(|(_, p)| p.class == class)
                .map(|(_, p)| p.grad.iter().map(|g| g.abs()).sum::<f64>())
                .sum();
            assert!(mass > 0.0, "{class:?}");
        }
    }

    #[test]
    fn every_class_passes() {
        let r = gradcheck(&Config::default(), &GradcheckOptions::default()).unwrap();
        assert_eq!(r.classes.len(), ParamClass::ALL.len());
        assert!(r.passed(), "{}", r.to_table());
    }

    #[test]
    fn injected_backward_fault_is_caught_in_its_class() {
        let opts = GradcheckOptions {
            faults: BackwardFaults {
                flip_delta_scale: true,
            },
            ..GradcheckOptions::default()
        };
        let r = gradcheck(&Config::default(), &opts).unwrap();
        assert!(!r.passed());
        assert!(
            r.class(ParamClass::NonRigid).unwrap().max_rel_err > 0.1,
            "{}",
            r.to_table()
        );
        assert!(r.class(ParamClass::Skinning).unwrap().max_rel_err < DEFAULT_TOLERANCE);
    }
}
