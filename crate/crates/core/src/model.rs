//! The assembled avatar: canonical gaussians, non-rigid field, skinning
//! field, color network, frame latents and per-frame pose corrections, with
//! a full forward pass to a framebuffer and its reverse-mode counterpart.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    canonicalize_viewdir, CanonicalViewDir, ColorLayout, ColorMlp, FrameLatents, LATENT_DIM, SH_DIM,
};
use crate::articulation::{
    apply_rigid, apply_rigid_backward, forward_kinematics, forward_kinematics_backward,
    lbs_transform, lbs_transform_backward, BoneTransforms, ObservedGaussian, PoseParams,
    SkinningCache, SkinningField,
};
use crate::deformation::{
    BackwardFaults, CanonicalAttrs, DeformCache, DeformedGaussians, HashGridConfig, NonRigidConfig,
    NonRigidField,
};
use crate::error::{Error, Result};
use crate::geometry::{
    covariance_from_linear, covariance_from_linear_backward, normalize3_backward, quat_mul,
    quat_mul_backward, quat_normalize_backward, sh_basis_with_grad, sigmoid, unit_quat_to_rotmat,
    unit_quat_to_rotmat_backward, Quat, RigidTransform,
};
use crate::nn::MlpCache;
use crate::params::{ParamClass, ParamId, ParamStore};
use crate::render::{render, render_backward, Camera, Framebuffer, SplatScene};
use crate::scene::{GaussianSet, GaussianTensors, FEATURE_DIM};
use crate::template::SkinnedTemplate;

/// Canonical centers and covariances.
pub type CanonicalGeometry = (Vec<Vector3<f64>>, Vec<Matrix3<f64>>);

/// Network and feature sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub skinning_width: usize,
    pub skinning_depth: usize,
    pub color_hidden: usize,
    pub latent_dim: usize,
    pub nonrigid: NonRigidConfig,
    pub hashgrid: HashGridConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            skinning_width: 128,
            skinning_depth: 4,
            color_hidden: 64,
            latent_dim: LATENT_DIM,
            nonrigid: NonRigidConfig::default(),
            hashgrid: HashGridConfig::default(),
        }
    }
}

impl ModelConfig {
    fn color_layout(&self) -> ColorLayout {
        ColorLayout {
            feature: self.feature_dim,
            local: self.nonrigid.feature_dim,
            latent: self.latent_dim,
        }
    }
}

const POSE_TABLE: &str = "pose.frames";

/// Per-training-frame pose parameters stored as one row each in the flat
/// [`PoseParams::to_flat`] layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTable {
    pub id: ParamId,
    pub joints: usize,
}

impl PoseTable {
    pub fn row_width(joints: usize) -> usize {
        8 + 4 * joints
    }

    pub fn new(store: &mut ParamStore, joints: usize, poses: &[PoseParams]) -> Self {
        let mut v: Vec<f64> = poses.iter().flat_map(|p| p.to_flat()).collect();
        if v.is_empty() {
            v = PoseParams::identity(joints).to_flat();
        }
        let id = store.register(POSE_TABLE, ParamClass::Pose, v, Self::row_width(joints));
        Self { id, joints }
    }

    pub fn attach(store: &ParamStore, joints: usize) -> Option<Self> {
        let id = store.find(POSE_TABLE)?;
        (store.param(id).row_width == Self::row_width(joints)).then_some(Self { id, joints })
    }

    pub fn frames(&self, store: &ParamStore) -> usize {
        store.value(self.id).len() / Self::row_width(self.joints)
    }

    pub fn get(&self, store: &ParamStore, frame: usize) -> PoseParams {
        let w = Self::row_width(self.joints);
        PoseParams::from_flat(
            &store.value(self.id)[frame * w..(frame + 1) * w],
            self.joints,
        )
    }

    /// Column of the global scale entry inside a row.
    pub fn scale_column(&self) -> usize {
        7 + 4 * self.joints
    }
}

/// Where the skeleton pose of a frame comes from.
#[derive(Debug, Clone, Copy)]
pub enum PoseSource<'a> {
    /// A learnable row of the pose table.
    Table(usize),
    /// A fixed pose (novel poses, animation).
    Explicit(&'a PoseParams),
}

#[derive(Debug, Clone, Copy)]
pub struct FrameSpec<'a> {
    pub camera: &'a Camera,
    pub pose: PoseSource<'a>,
    /// Latent-code row; `None` or out-of-range uses the last training code.
    pub latent: Option<usize>,
}

/// Training-time randomization applied to one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Perturbation {
    /// Left-multiplied onto each local joint rotation.
    pub pose_noise: Option<Vec<Quat>>,
    /// Applied to every canonicalized view direction.
    pub view_rotation: Option<Matrix3<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    pub nonrigid: bool,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub framebuffer: Framebuffer,
    pub scene: SplatScene,
    pub canonical: CanonicalAttrs,
    pub deformed: DeformedGaussians,
    pub observed: Vec<ObservedGaussian>,
    pub transforms: Vec<RigidTransform>,
    pub pose_used: PoseParams,
    source: PoseSourceOwned,
    noise: Option<Vec<Quat>>,
    pose_raw: PoseParams,
    camera: Camera,
    latent_row: Option<usize>,
    deform_cache: DeformCache,
    fk: BoneTransforms,
    skin: SkinningCache,
    rot_d: Vec<Matrix3<f64>>,
    view_raw: Vec<Vector3<f64>>,
    view: Vec<CanonicalViewDir>,
    view_rotation: Option<Matrix3<f64>>,
    sh_jacobians: Vec<[[f64; 3]; SH_DIM]>,
    color: MlpCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PoseSourceOwned {
    Table(usize),
    Explicit,
}

/// Extra upstream gradients on observation-space quantities (the AIAP terms).
#[derive(Debug, Clone, Default)]
pub struct ObservedGrads {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
}

/// Per-gaussian screen-space statistics produced by a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardStats {
    pub view_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Avatar {
    pub template: SkinnedTemplate,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub gaussians: GaussianTensors,
    pub skinning: SkinningField,
    pub nonrigid: NonRigidField,
    pub color: ColorMlp,
    pub latents: FrameLatents,
    pub poses: PoseTable,
    #[doc(hidden)]
    pub faults: BackwardFaults,
}

impl Avatar {
    /// Registers every learnable tensor. `poses` seeds the per-frame pose
    /// table and fixes the number of frame latents.
    pub fn new(
        template: SkinnedTemplate,
        config: ModelConfig,
        set: &GaussianSet,
        poses: &[PoseParams],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if set.feature_dim != config.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "gaussian features have {} channels, config expects {}",
                set.feature_dim, config.feature_dim
            )));
        }
        let mut store = ParamStore::new();
        let gaussians = GaussianTensors::register(&mut store, set);
        let skinning = SkinningField::new(
            &mut store,
            &template,
            config.skinning_width,
            config.skinning_depth,
            rng,
        );
        let nonrigid =
            NonRigidField::new(&mut store, &template, config.nonrigid, config.hashgrid, rng);
        let color = ColorMlp::new(&mut store, config.color_layout(), config.color_hidden, rng);
        let latents = FrameLatents::new(&mut store, poses.len(), config.latent_dim);
        let poses = PoseTable::new(&mut store, template.num_joints(), poses);
        Ok(Self {
            template,
            config,
            store,
            gaussians,
            skinning,
            nonrigid,
            color,
            latents,
            poses,
            faults: BackwardFaults::default(),
        })
    }

    /// Rebuilds the structure around an already populated store.
    pub fn attach(
        template: SkinnedTemplate,
        config: ModelConfig,
        store: ParamStore,
    ) -> Result<Self> {
        let missing =
            |what: &str| Error::Checkpoint(format!("missing or malformed tensors for {what}"));
        let gaussians = GaussianTensors::attach(&store).ok_or_else(|| missing("gaussians"))?;
        let skinning = SkinningField::attach(
            &store,
            &template,
            config.skinning_width,
            config.skinning_depth,
        )
        .ok_or_else(|| missing("skinning field"))?;
        let nonrigid = NonRigidField::attach(&store, &template, config.nonrigid, config.hashgrid)
            .ok_or_else(|| missing("non-rigid field"))?;
        let color = ColorMlp::attach(&store, config.color_layout(), config.color_hidden)
            .ok_or_else(|| missing("color network"))?;
        let latents = FrameLatents::attach(&store, config.latent_dim)
            .ok_or_else(|| missing("frame latents"))?;
        let poses = PoseTable::attach(&store, template.num_joints())
            .ok_or_else(|| missing("pose table"))?;
        Ok(Self {
            template,
            config,
            store,
            gaussians,
            skinning,
            nonrigid,
            color,
            latents,
            poses,
            faults: BackwardFaults::default(),
        })
    }

    pub fn num_gaussians(&self) -> usize {
        self.gaussians.len(&self.store)
    }

    pub fn pose(&self, source: PoseSource) -> PoseParams {
        match source {
            PoseSource::Table(f) => self.poses.get(&self.store, f),
            PoseSource::Explicit(p) => p.clone(),
        }
    }

    /// Canonical position and covariance of every gaussian.
    pub fn canonical_geometry(&self) -> Result<CanonicalGeometry> {
        let c = self.gaussians.canonical_attrs(&self.store);
        let covs = c
            .log_scales
            .iter()
            .zip(&c.rotations)
            .map(|(ls, q)| {
                Ok(covariance_from_linear(
                    &unit_quat_to_rotmat(q.normalize()?),
                    &ls.map(f64::exp),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((c.positions, covs))
    }

    /// Accumulates gradients on canonical covariances into log-scales and rotations.
    pub fn canonical_cov_backward(&mut self, grads: &[Matrix3<f64>]) -> Result<()> {
        let c = self.gaussians.canonical_attrs(&self.store);
        let n = c.positions.len();
        let mut dls = vec![0.0; 3 * n];
        let mut dq = vec![0.0; 4 * n];
        for i in 0..n {
            let u = c.rotations[i].normalize()?;
            let s = c.log_scales[i].map(f64::exp);
            let (dm, ds) = covariance_from_linear_backward(&unit_quat_to_rotmat(u), &s, &grads[i]);
            let g = quat_normalize_backward(c.rotations[i], unit_quat_to_rotmat_backward(u, &dm));
            for k in 0..3 {
                dls[3 * i + k] = ds[k] * s[k];
            }
            dq[4 * i..4 * i + 4].copy_from_slice(&g.to_array());
        }
        self.store.accumulate(self.gaussians.log_scale, &dls);
        self.store.accumulate(self.gaussians.rotation, &dq);
        Ok(())
    }

    /// Canonical -> deformed -> observed -> colored -> rendered.
    pub fn forward(
        &self,
        frame: FrameSpec,
        perturb: &Perturbation,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        let store = &self.store;
        let canonical = self.gaussians.canonical_attrs(store);
        let n = canonical.positions.len();
        let pose_raw = self.pose(frame.pose);
        let mut pose_used = pose_raw.clone();
        if let Some(noise) = &perturb.pose_noise {
            for (j, q) in pose_used.local_rotations.iter_mut().enumerate() {
                *q = quat_mul(noise[j], Quat::from_array(*q)).to_array();
            }
        }
        let (deformed, deform_cache) =
            self.nonrigid
                .deform(store, &canonical, &pose_used, opts.nonrigid)?;
        let fk = forward_kinematics(&self.template, &pose_used)?;
        let skin = self.skinning.forward(store, &deformed.positions);

        let center = frame.camera.center();
        let mut transforms = Vec::with_capacity(n);
        let mut observed = Vec::with_capacity(n);
        let mut rot_d = Vec::with_capacity(n);
        let mut view_raw = Vec::with_capacity(n);
        let mut view = Vec::with_capacity(n);
        let mut sh_jacobians = Vec::with_capacity(n);
        let layout = self.color.layout;
        let mut input = Array2::zeros((n, layout.input_dim()));
        let latent = self.latents.code(store, frame.latent);
        let features = store.value(self.gaussians.feature);
        let fdim = self.config.feature_dim;
        for i in 0..n {
            let t = lbs_transform(&skin.weights[i], &fk.bones);
            let r = unit_quat_to_rotmat(deformed.rotations[i]);
            let o = apply_rigid(&deformed.positions[i], &r, &deformed.scales[i], &t);
            let raw = o.position - center;
            let cv = canonicalize_viewdir(&raw.normalize(), &t.linear);
            let dir = match &perturb.view_rotation {
                Some(m) => m * cv.dir,
                None => cv.dir,
            };
            let (sh, jac) = sh_basis_with_grad(&dir);
            let mut row = input.row_mut(i);
            for k in 0..fdim {
                row[k] = features[i * fdim + k];
            }
            for (k, z) in deformed.features[i].iter().enumerate() {
                row[layout.local_offset() + k] = *z;
            }
            for (k, z) in latent.iter().enumerate() {
                row[layout.latent_offset() + k] = *z;
            }
            for (k, s) in sh.iter().enumerate() {
                row[layout.sh_offset() + k] = *s;
            }
            transforms.push(t);
            observed.push(o);
            rot_d.push(r);
            view_raw.push(raw);
            view.push(cv);
            sh_jacobians.push(jac);
        }
        let color = self.color.forward(store, input.view());
        let rgb = color.output();
        let opacity_logits = store.value(self.gaussians.opacity);
        let mut scene = SplatScene::default();
        for i in 0..n {
            scene.push(
                observed[i].position,
                observed[i].covariance,
                sigmoid(opacity_logits[i]),
                [rgb[(i, 0)], rgb[(i, 1)], rgb[(i, 2)]],
            );
        }
        let framebuffer = render(&scene, frame.camera);
        Ok(ForwardPass {
            framebuffer,
            scene,
            canonical,
            deformed,
            observed,
            transforms,
            pose_used,
            source: match frame.pose {
                PoseSource::Table(f) => PoseSourceOwned::Table(f),
                PoseSource::Explicit(_) => PoseSourceOwned::Explicit,
            },
            noise: perturb.pose_noise.clone(),
            pose_raw,
            camera: *frame.camera,
            latent_row: frame.latent,
            deform_cache,
            fk,
            skin,
            rot_d,
            view_raw,
            view,
            view_rotation: perturb.view_rotation,
            sh_jacobians,
            color,
        })
    }

    /// Evaluation-mode render: no pose noise, no view augmentation.
    pub fn render(&self, frame: FrameSpec, nonrigid: bool) -> Result<Framebuffer> {
        Ok(self
            .forward(frame, &Perturbation::default(), ForwardOptions { nonrigid })?
            .framebuffer)
    }

    /// Accumulates `dL/dtheta` for every parameter given image-space
    /// gradients and optional gradients on observed positions/covariances.
    pub fn backward(
        &mut self,
        fwd: &ForwardPass,
        grad_rgb: &[f64],
        grad_alpha: &[f64],
        extra: &ObservedGrads,
    ) -> Result<BackwardStats> {
        let n = fwd.observed.len();
        let sg = render_backward(
            &fwd.framebuffer,
            &fwd.scene,
            &fwd.camera,
            grad_rgb,
            grad_alpha,
        )?;
        let store = &mut self.store;

        let alpha = &fwd.scene.opacities;
        let d_logit: Vec<f64> = (0..n)
            .map(|i| sg.opacities[i] * alpha[i] * (1.0 - alpha[i]))
            .collect();
        store.accumulate(self.gaussians.opacity, &d_logit);

        let mut d_rgb = Array2::zeros((n, 3));
        for i in 0..n {
            for c in 0..3 {
                d_rgb[(i, c)] = sg.colors[i][c];
            }
        }
        let d_in = self.color.backward(store, &fwd.color, d_rgb.view());
        let layout = self.color.layout;
        let fdim = self.config.feature_dim;
        let mut d_feat = vec![0.0; n * fdim];
        let mut d_local = vec![vec![0.0; layout.local]; n];
        let mut d_latent = vec![0.0; layout.latent];

        let mut grad_bones =
            vec![RigidTransform::new(Matrix3::zeros(), Vector3::zeros()); fwd.fk.bones.len()];
        let mut d_pos_d = Vec::with_capacity(n);
        let mut d_scale_d = Vec::with_capacity(n);
        let mut d_rot_d = Vec::with_capacity(n);
        let mut d_weights = Vec::with_capacity(n);
        for i in 0..n {
            let row = d_in.row(i);
            for k in 0..fdim {
                d_feat[i * fdim + k] = row[k];
            }
            for k in 0..layout.local {
                d_local[i][k] = row[layout.local_offset() + k];
            }
            for k in 0..layout.latent {
                d_latent[k] += row[layout.latent_offset() + k];
            }
            let mut d_dir = Vector3::zeros();
            for k in 0..SH_DIM {
                let g = row[layout.sh_offset() + k];
                for c in 0..3 {
                    d_dir[c] += g * fwd.sh_jacobians[i][k][c];
                }
            }
            if let Some(m) = &fwd.view_rotation {
                d_dir = m.transpose() * d_dir;
            }
            let (dd, d_linear_view) = fwd.view[i].backward(&d_dir);
            let mut d_pos_o = sg.positions[i] + normalize3_backward(&fwd.view_raw[i], &dd);
            let mut d_cov_o = sg.covariances[i];
            if let Some(p) = extra.positions.get(i) {
                d_pos_o += p;
            }
            if let Some(c) = extra.covariances.get(i) {
                d_cov_o += c;
            }
            let o = &fwd.observed[i];
            let (d_frame, d_scale) = covariance_from_linear_backward(&o.frame, &o.scale, &d_cov_o);
            let t = &fwd.transforms[i];
            let (mut dt, dx, dr) = apply_rigid_backward(
                &fwd.deformed.positions[i],
                &fwd.rot_d[i],
                t,
                &d_pos_o,
                &d_frame,
            );
            dt.linear += d_linear_view;
            d_weights.push(lbs_transform_backward(
                &fwd.skin.weights[i],
                &fwd.fk.bones,
                &dt,
                &mut grad_bones,
            ));
            d_pos_d.push(dx);
            d_scale_d.push(d_scale);
            d_rot_d.push(unit_quat_to_rotmat_backward(fwd.deformed.rotations[i], &dr));
        }
        store.accumulate(self.gaussians.feature, &d_feat);
        self.latents.accumulate(store, fwd.latent_row, &d_latent);

        let d_skin_x = self.skinning.backward(store, &fwd.skin, &d_weights);
        for (a, b) in d_pos_d.iter_mut().zip(&d_skin_x) {
            *a += b;
        }
        let dg = self.nonrigid.deform_backward(
            store,
            &fwd.canonical,
            &fwd.pose_used,
            &fwd.deformed,
            &fwd.deform_cache,
            &d_pos_d,
            &d_scale_d,
            &d_rot_d,
            &d_local,
            self.faults,
        );
        let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        store.accumulate(self.gaussians.position, &flat3(&dg.positions));
        store.accumulate(self.gaussians.log_scale, &flat3(&dg.log_scales));
        store.accumulate(
            self.gaussians.rotation,
            &dg.rotations
                .iter()
                .flat_map(|q| q.to_array())
                .collect::<Vec<_>>(),
        );

        if let PoseSourceOwned::Table(frame) = fwd.source {
            let mut pg =
                forward_kinematics_backward(&self.template, &fwd.pose_used, &fwd.fk, &grad_bones);
            if let Some(extra) = &dg.local_rotations {
                for (a, b) in pg.local_rotations.iter_mut().zip(extra) {
                    *a += *b;
                }
            }
            if let Some(noise) = &fwd.noise {
                for (j, g) in pg.local_rotations.iter_mut().enumerate() {
                    *g = quat_mul_backward(noise[j], fwd.pose_raw.local(j), *g).1;
                }
            }
            let w = PoseTable::row_width(self.poses.joints);
            let row = &mut store.grad_mut(self.poses.id)[frame * w..(frame + 1) * w];
            for (d, s) in row.iter_mut().zip(pg.to_flat()) {
                *d += s;
            }
        }
        Ok(BackwardStats {
            view_grad_norm: sg.view_grad_norm,
            visible: sg.visible,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Camera;
    use crate::template::CapsuleChain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            skinning_width: 16,
            skinning_depth: 2,
            color_hidden: 8,
            nonrigid: NonRigidConfig {
                depth: 1,
                width: 8,
                pose_dim: 4,
                feature_dim: 16,
            },
            hashgrid: HashGridConfig {
                levels: 2,
                features_per_level: 2,
                log2_table_size: 8,
                base_resolution: 2,
                finest_resolution: 4,
            },
            ..ModelConfig::default()
        }
    }

    fn setup() -> (Avatar, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = CapsuleChain::default().build().unwrap();
        let set = GaussianSet::init_from_template(&t, 40, FEATURE_DIM, &mut rng).unwrap();
        let poses = vec![PoseParams::identity(t.num_joints()); 2];
        let a = Avatar::new(t, small_config(), &set, &poses, &mut rng).unwrap();
        let cam = Camera::look_at(
            Vector3::new(0.0, -3.0, 0.8),
            Vector3::new(0.0, 0.0, 0.8),
            Vector3::new(0.0, 0.0, 1.0),
            16,
            16,
            20.0,
        );
        (a, cam)
    }

    #[test]
    fn attach_reconstructs_an_equal_model() {
        let (a, cam) = setup();
        let b = Avatar::attach(a.template.clone(), a.config, a.store.clone()).unwrap();
        let f = FrameSpec {
            camera: &cam,
            pose: PoseSource::Table(0),
            latent: Some(0),
        };
        assert_eq!(
            a.render(f, true).unwrap().rgb,
            b.render(f, true).unwrap().rgb
        );
    }

    #[test]
    fn zero_initialized_nonrigid_is_identity() {
        let (a, cam) = setup();
        let f = FrameSpec {
            camera: &cam,
            pose: PoseSource::Table(1),
            latent: Some(1),
        };
        let on = a.render(f, true).unwrap();
        let off = a.render(f, false).unwrap();
        assert!(on.alpha.iter().any(|v| *v > 0.0));
        for (x, y) in on.rgb.iter().zip(&off.rgb) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn explicit_pose_matches_table_row() {
        let (a, cam) = setup();
        let p = a.poses.get(&a.store, 0);
        let f1 = FrameSpec {
            camera: &cam,
            pose: PoseSource::Table(0),
            latent: None,
        };
        let f2 = FrameSpec {
            pose: PoseSource::Explicit(&p),
            ..f1
        };
        assert_eq!(
            a.render(f1, false).unwrap().rgb,
            a.render(f2, false).unwrap().rgb
        );
    }

    #[test]
    fn mismatched_feature_dim_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = CapsuleChain::default().build().unwrap();
        let set = GaussianSet::init_from_template(&t, 10, 8, &mut rng).unwrap();
        assert!(Avatar::new(t, small_config(), &set, &[], &mut rng).is_err());
    }
}
