//! Procedural articulated scene: a capsule chain with a striped texture,
//! bent through a motion clip and photographed from an orbit. Ground-truth
//! images come from the oracle renderer applied to a dense set of opaque
//! gaussians glued to the posed surface.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::articulation::{forward_kinematics, lbs_transform, PoseParams};
use crate::config::SynthConfig;
use crate::dataset::{Dataset, Frame, Split};
use crate::error::Result;
use crate::geometry::Quat;
use crate::render::{render_oracle, Camera, Framebuffer, SplatScene};
use crate::template::{CapsuleChain, SkinnedTemplate};

const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.30, 0.25],
    [0.25, 0.45, 0.85],
    [0.30, 0.80, 0.35],
    [0.90, 0.80, 0.30],
];
const STRIPE_PERIOD: f64 = 0.3;

pub fn chain_for(cfg: &SynthConfig) -> CapsuleChain {
    CapsuleChain {
        bones: cfg.bones,
        ..CapsuleChain::default()
    }
}

/// Surface albedo at a canonical surface point with skinning weights `w`.
pub fn albedo(p: &Vector3<f64>, w: &[f64]) -> [f64; 3] {
    let mut base = [0.0; 3];
    for (b, wb) in w.iter().enumerate() {
        for c in 0..3 {
            base[c] += wb * PALETTE[b % PALETTE.len()][c];
        }
    }
    let stripe = 0.65 + 0.35 * (std::f64::consts::TAU * p.y / STRIPE_PERIOD).sin();
    let around = 0.85 + 0.15 * (2.0 * p.z.atan2(p.x)).cos();
    base.map(|v| (v * stripe * around).clamp(0.0, 1.0))
}

/// Pose bending every non-root joint about +z so the total bend is `deg`.
pub fn bend_pose(joints: usize, deg: f64) -> PoseParams {
    let mut pose = PoseParams::identity(joints);
    if joints > 1 {
        let per = (deg / (joints - 1) as f64).to_radians();
        let q = Quat::from_axis_angle(Vector3::z(), per).to_array();
        for r in pose.local_rotations.iter_mut().skip(1) {
            *r = q;
        }
    }
    pose
}

/// Camera on a horizontal orbit around the chain's midpoint.
pub fn orbit_camera(cfg: &SynthConfig, template: &SkinnedTemplate, azimuth_deg: f64) -> Camera {
    let center = template.bbox.center();
    let a = azimuth_deg.to_radians();
    let eye = center + Vector3::new(a.sin(), 0.0, -a.cos()) * cfg.camera_distance;
    Camera::look_at(eye, center, Vector3::y(), cfg.width, cfg.height, cfg.focal)
}

/// Dense textured gaussians sampled on the canonical template surface.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub sigma: f64,
    pub opacity: f64,
}

impl GroundTruth {
    pub fn sample(template: &SkinnedTemplate, n: usize, opacity: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        for _ in 0..n {
            let s = template.sample_surface(&mut rng);
            let w = template.interpolate_weights(&s);
            colors.push(albedo(&s.point, &w));
            points.push(s.point);
            weights.push(w);
        }
        let spacing = (template.total_area() / n.max(1) as f64).sqrt();
        Self {
            points,
            weights,
            colors,
            sigma: 0.7 * spacing,
            opacity,
        }
    }

    /// Gaussians posed by linear blend skinning with the template weights.
    pub fn posed_scene(&self, template: &SkinnedTemplate, pose: &PoseParams) -> Result<SplatScene> {
        let fk = forward_kinematics(template, pose)?;
        let mut scene = SplatScene::default();
        let cov = Matrix3::identity() * (self.sigma * self.sigma);
        for ((p, w), c) in self.points.iter().zip(&self.weights).zip(&self.colors) {
            let t = lbs_transform(w, &fk.bones);
            scene.push(
                t.apply_point(p),
                t.linear * cov * t.linear.transpose(),
                self.opacity,
                *c,
            );
        }
        Ok(scene)
    }

    pub fn render(
        &self,
        template: &SkinnedTemplate,
        pose: &PoseParams,
        camera: &Camera,
    ) -> Result<Framebuffer> {
        Ok(render_oracle(
            &self.posed_scene(template, pose)?,
            camera,
            false,
        ))
    }
}

/// Template vertices posed with their ground-truth weights.
pub fn posed_vertices(template: &SkinnedTemplate, pose: &PoseParams) -> Result<Vec<Vector3<f64>>> {
    let fk = forward_kinematics(template, pose)?;
    Ok(template
        .vertices
        .iter()
        .zip(&template.weights)
        .map(|(v, w)| lbs_transform(w, &fk.bones).apply_point(v))
        .collect())
}

/// Bend angles of the training clip and of the held-out poses in between.
pub fn bend_schedule(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.train_frames.max(1);
    let train: Vec<f64> = (0..n)
        .map(|k| {
            if n == 1 {
                0.0
            } else {
                cfg.max_bend_deg * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    let h = cfg.heldout_frames;
    let heldout = (0..h)
        .map(|k| {
            let gap = (k + 1) * (n - 1).max(1) / (h + 1);
            let lo = train[gap.min(n - 1)];
            let hi = train[(gap + 1).min(n - 1)];
            0.5 * (lo + hi)
        })
        .collect();
    (train, heldout)
}

fn train_azimuth(cfg: &SynthConfig, k: usize) -> f64 {
    cfg.orbit_deg * (2.4 * k as f64).cos()
}

pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let template = chain_for(cfg).build()?;
    let gt = GroundTruth::sample(&template, cfg.gt_gaussians, cfg.gt_opacity, seed);
    let (train, heldout) = bend_schedule(cfg);
    let b = template.num_joints();
    let mut specs: Vec<(PoseParams, Camera)> = train
        .iter()
        .enumerate()
        .map(|(k, &deg)| {
            (
                bend_pose(b, deg),
                orbit_camera(cfg, &template, train_azimuth(cfg, k)),
            )
        })
        .collect();
    specs.extend(
        heldout
            .iter()
            .map(|&deg| (bend_pose(b, deg), orbit_camera(cfg, &template, 0.0))),
    );
    let frames = specs
        .into_iter()
        .map(|(pose, camera)| {
            let fb = gt.render(&template, &pose, &camera)?;
            Ok(Frame {
                image: fb.rgb_image(),
                mask: fb.alpha_image(),
                camera,
                pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = Split {
        train: (0..train.len()).collect(),
        heldout: (train.len()..train.len() + heldout.len()).collect(),
    };
    Ok(Dataset {
        template,
        frames,
        split,
    })
}

/// Number of gaussian centers farther than `3 * s_max` from the surface.
pub fn scattered_count(
    surface: &SkinnedTemplate,
    posed_vertices: &[Vector3<f64>],
    positions: &[Vector3<f64>],
    max_scales: &[f64],
) -> usize {
    positions
        .iter()
        .zip(max_scales)
        .filter(|(p, s)| surface.distance_to_surface(posed_vertices, p) > 3.0 * **s)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mask_iou;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 32,
            height: 32,
            focal: 35.0,
            gt_gaussians: 2500,
            train_frames: 3,
            heldout_frames: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rest_pose_mask_coverage_is_moderate() {
        let cfg = SynthConfig::default();
        let t = chain_for(&cfg).build().unwrap();
        let gt = GroundTruth::sample(&t, 4000, cfg.gt_opacity, 0);
        let fb = gt
            .render(&t, &bend_pose(2, 0.0), &orbit_camera(&cfg, &t, 0.0))
            .unwrap();
        let cover = fb.alpha.iter().filter(|v| **v > 0.5).count() as f64 / fb.alpha.len() as f64;
        assert!(cover > 0.1 && cover < 0.9, "{cover}");
    }

    #[test]
    fn elbow_bend_changes_the_mask() {
        let cfg = SynthConfig::default();
        let t = chain_for(&cfg).build().unwrap();
        let gt = GroundTruth::sample(&t, 4000, cfg.gt_opacity, 0);
        let cam = orbit_camera(&cfg, &t, 0.0);
        let rest = gt.render(&t, &bend_pose(2, 0.0), &cam).unwrap();
        let bent = gt.render(&t, &bend_pose(2, 90.0), &cam).unwrap();
        assert!(mask_iou(&rest.alpha, &bent.alpha) < 0.99);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize(&small(), 3).unwrap();
        let b = synthesize(&small(), 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.split.train, vec![0, 1, 2]);
        assert_eq!(a.split.heldout, vec![3]);
    }

    #[test]
    fn heldout_bends_lie_between_training_bends() {
        let cfg = SynthConfig::default();
        let (train, held) = bend_schedule(&cfg);
        for h in held {
            assert!(!train.contains(&h));
            assert!(h > 0.0 && h < cfg.max_bend_deg);
        }
    }

    #[test]
    fn posed_surface_has_no_scattered_points() {
        let cfg = SynthConfig::default();
        let t = chain_for(&cfg).build().unwrap();
        let pose = bend_pose(2, 45.0);
        let verts = posed_vertices(&t, &pose).unwrap();
        let gt = GroundTruth::sample(&t, 300, 0.9, 1);
        let scene = gt.posed_scene(&t, &pose).unwrap();
        let far = vec![0.05; scene.len()];
        assert_eq!(scattered_count(&t, &verts, &scene.positions, &far), 0);
        let moved: Vec<_> = scene
            .positions
            .iter()
            .map(|p| p + Vector3::new(0.0, 0.0, 1.0))
            .collect();
        assert_eq!(scattered_count(&t, &verts, &moved, &far), moved.len());
    }
}
