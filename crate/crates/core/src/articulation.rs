//! Skeleton kinematics, the learned skinning field and forward linear blend
//! skinning of gaussian positions and rotations.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    covariance_from_linear, quat_normalize_backward, unit_quat_to_rotmat,
    unit_quat_to_rotmat_backward, Quat, RigidTransform,
};
use crate::nn::{Activation, Mlp, MlpCache, OutputInit};
use crate::params::{ParamClass, ParamStore};
use crate::template::{Aabb, SkinnedTemplate};

/// Per-frame skeleton parameters. Quaternions are normalized on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub translation: [f64; 3],
    /// `(w, x, y, z)`
    pub global_rotation: [f64; 4],
    pub local_rotations: Vec<[f64; 4]>,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl PoseParams {
    pub fn identity(joints: usize) -> Self {
        Self {
            translation: [0.0; 3],
            global_rotation: [1.0, 0.0, 0.0, 0.0],
            local_rotations: vec![[1.0, 0.0, 0.0, 0.0]; joints],
            scale: 1.0,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.local_rotations.len()
    }

    pub fn local(&self, j: usize) -> Quat {
        Quat::from_array(self.local_rotations[j])
    }

    pub fn global(&self) -> Quat {
        Quat::from_array(self.global_rotation)
    }

    /// Flat layout `[t(3), global(4), local(4B), scale]` used for finite differences.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.translation.to_vec();
        v.extend_from_slice(&self.global_rotation);
        for q in &self.local_rotations {
            v.extend_from_slice(q);
        }
        v.push(self.scale);
        v
    }

    pub fn from_flat(v: &[f64], joints: usize) -> Self {
        Self {
            translation: [v[0], v[1], v[2]],
            global_rotation: [v[3], v[4], v[5], v[6]],
            local_rotations: (0..joints)
                .map(|j| {
                    let o = 7 + 4 * j;
                    [v[o], v[o + 1], v[o + 2], v[o + 3]]
                })
                .collect(),
            scale: v[7 + 4 * joints],
        }
    }
}

/// Gradient with respect to every entry of [`PoseParams`] (raw quaternions).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrad {
    pub translation: Vector3<f64>,
    pub global_rotation: Quat,
    pub local_rotations: Vec<Quat>,
    pub scale: f64,
}

impl PoseGrad {
    pub fn zeros(joints: usize) -> Self {
        Self {
            translation: Vector3::zeros(),
            global_rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
            local_rotations: vec![Quat::new(0.0, 0.0, 0.0, 0.0); joints],
            scale: 0.0,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.translation.iter().copied().collect();
        v.extend_from_slice(&self.global_rotation.to_array());
        for q in &self.local_rotations {
            v.extend_from_slice(&q.to_array());
        }
        v.push(self.scale);
        v
    }

    pub fn add_assign(&mut self, o: &PoseGrad) {
        self.translation += o.translation;
        self.global_rotation += o.global_rotation;
        for (a, b) in self.local_rotations.iter_mut().zip(&o.local_rotations) {
            *a += *b;
        }
        self.scale += o.scale;
    }
}

/// Canonical-to-observation transforms, one per bone.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneTransforms {
    pub bones: Vec<RigidTransform>,
    // Kept for the backward pass.
    chain: Vec<RigidTransform>,
    locals: Vec<Matrix3<f64>>,
    unit_locals: Vec<Quat>,
    unit_global: Quat,
    global_rot: Matrix3<f64>,
}

impl BoneTransforms {
    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }
}

/// Composes local joint rotations about rest-pose joint positions down the
/// tree, then applies the global similarity `(scale * R_g, t)`.
pub fn forward_kinematics(
    template: &SkinnedTemplate,
    pose: &PoseParams,
) -> crate::error::Result<BoneTransforms> {
    let b = template.num_joints();
    if pose.num_joints() != b {
        return Err(crate::error::Error::DimensionMismatch(format!(
            "pose has {} joints, template {b}",
            pose.num_joints()
        )));
    }
    let unit_global = pose.global().normalize()?;
    let global_rot = unit_quat_to_rotmat(unit_global);
    let g = RigidTransform::new(global_rot * pose.scale, Vector3::from(pose.translation));
    let mut chain = vec![RigidTransform::identity(); b];
    let mut locals = vec![Matrix3::identity(); b];
    let mut unit_locals = vec![Quat::identity(); b];
    for &j in template.topo_order() {
        let u = pose.local(j).normalize()?;
        let r = unit_quat_to_rotmat(u);
        unit_locals[j] = u;
        locals[j] = r;
        chain[j] = match template.parents[j] {
            None => RigidTransform::new(r, template.rest_joints[j]),
            Some(p) => chain[p].compose(&RigidTransform::new(
                r,
                template.rest_joints[j] - template.rest_joints[p],
            )),
        };
    }
    let bones = (0..b)
        .map(|j| {
            let a = &chain[j];
            let unposed =
                RigidTransform::new(a.linear, a.translation - a.linear * template.rest_joints[j]);
            g.compose(&unposed)
        })
        .collect();
    Ok(BoneTransforms {
        bones,
        chain,
        locals,
        unit_locals,
        unit_global,
        global_rot,
    })
}

/// Backpropagates gradients on every bone transform to the pose parameters.
pub fn forward_kinematics_backward(
    template: &SkinnedTemplate,
    pose: &PoseParams,
    fk: &BoneTransforms,
    grad_bones: &[RigidTransform],
) -> PoseGrad {
    let b = template.num_joints();
    let m = fk.global_rot * pose.scale;
    let mut d_m = Matrix3::zeros();
    let mut d_t = Vector3::zeros();
    let mut d_lin = vec![Matrix3::zeros(); b];
    let mut d_tr = vec![Vector3::zeros(); b];
    for j in 0..b {
        let g = &grad_bones[j];
        let a = &fk.chain[j];
        let jpos = template.rest_joints[j];
        let inner = a.translation - a.linear * jpos;
        d_t += g.translation;
        d_m += g.linear * a.linear.transpose() + g.translation * inner.transpose();
        let mt_dt = m.transpose() * g.translation;
        d_lin[j] += m.transpose() * g.linear - mt_dt * jpos.transpose();
        d_tr[j] += mt_dt;
    }
    let mut out = PoseGrad::zeros(b);
    out.translation = d_t;
    let d_rg = d_m * pose.scale;
    out.scale = d_m.component_mul(&fk.global_rot).sum();
    let dq = unit_quat_to_rotmat_backward(fk.unit_global, &d_rg);
    out.global_rotation = quat_normalize_backward(pose.global(), dq);
    for &j in template.topo_order().iter().rev() {
        let d_r = match template.parents[j] {
            None => d_lin[j],
            Some(p) => {
                let ap = fk.chain[p];
                let off = template.rest_joints[j] - template.rest_joints[p];
                let dl = d_lin[j] * fk.locals[j].transpose() + d_tr[j] * off.transpose();
                let dt = d_tr[j];
                d_lin[p] += dl;
                d_tr[p] += dt;
                ap.linear.transpose() * d_lin[j]
            }
        };
        let dq = unit_quat_to_rotmat_backward(fk.unit_locals[j], &d_r);
        out.local_rotations[j] = quat_normalize_backward(pose.local(j), dq);
    }
    out
}

/// Tree-aware softmax turning `B + 1` logits into `B` skinning weights.
///
/// At every joint a softmax chooses between stopping there and descending
/// into one of its children; a joint's weight is the product of the choices
/// along its root path times its own stop probability. Logit `0` scores
/// stopping at the root, logit `c` (for non-root `c`) scores descending into
/// `c`, and logit `B` is the stop score shared by all non-root joints.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalSoftmax {
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    order: Vec<usize>,
}

/// Intermediate values of one hierarchical-softmax evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HsCache {
    /// Probability of reaching each joint.
    reach: Vec<f64>,
    /// Per joint: probabilities of `[stop, child_0, child_1, ...]`.
    probs: Vec<Vec<f64>>,
}

impl HierarchicalSoftmax {
    pub fn new(template: &SkinnedTemplate) -> Self {
        let b = template.num_joints();
        Self {
            parents: template.parents.clone(),
            children: (0..b).map(|j| template.children(j).to_vec()).collect(),
            order: template.topo_order().to_vec(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_logits(&self) -> usize {
        self.parents.len() + 1
    }

    fn stop_logit(&self, j: usize) -> usize {
        if self.parents[j].is_none() {
            0
        } else {
            self.parents.len()
        }
    }

    pub fn forward(&self, logits: &[f64]) -> (Vec<f64>, HsCache) {
        let b = self.num_joints();
        let mut reach = vec![0.0; b];
        let mut probs = vec![Vec::new(); b];
        let mut w = vec![0.0; b];
        for &j in &self.order {
            if self.parents[j].is_none() {
                reach[j] = 1.0;
            }
            let kids = &self.children[j];
            let mut scores = Vec::with_capacity(kids.len() + 1);
            scores.push(logits[self.stop_logit(j)]);
            scores.extend(kids.iter().map(|&c| logits[c]));
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            w[j] = reach[j] * p[0];
            for (k, &c) in kids.iter().enumerate() {
                reach[c] = reach[j] * p[k + 1];
            }
            probs[j] = p;
        }
        (w, HsCache { reach, probs })
    }

    pub fn backward(&self, cache: &HsCache, grad_w: &[f64]) -> Vec<f64> {
        let b = self.num_joints();
        let mut d_reach = vec![0.0; b];
        let mut d_logits = vec![0.0; b + 1];
        for &j in self.order.iter().rev() {
            let p = &cache.probs[j];
            let kids = &self.children[j];
            // dL/dp for [stop, children...]
            let mut dp = Vec::with_capacity(p.len());
            dp.push(grad_w[j] * cache.reach[j]);
            d_reach[j] += grad_w[j] * p[0];
            for (k, &c) in kids.iter().enumerate() {
                dp.push(d_reach[c] * cache.reach[j]);
                d_reach[j] += d_reach[c] * p[k + 1];
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let ds: Vec<f64> = p.iter().zip(&dp).map(|(pi, di)| pi * (di - dot)).collect();
            d_logits[self.stop_logit(j)] += ds[0];
            for (k, &c) in kids.iter().enumerate() {
                d_logits[c] += ds[k + 1];
            }
        }
        d_logits
    }
}

/// Coordinate network predicting skinning weights from a canonical point.
#[derive(Debug)]
pub struct SkinningField {
    pub mlp: Mlp,
    pub softmax: HierarchicalSoftmax,
    pub bbox: Aabb,
    clamped: AtomicUsize,
}

impl Clone for SkinningField {
    fn clone(&self) -> Self {
        Self {
            mlp: self.mlp.clone(),
            softmax: self.softmax.clone(),
            bbox: self.bbox,
            clamped: AtomicUsize::new(self.clamped_count()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkinningCache {
    mlp: MlpCache,
    hs: Vec<HsCache>,
    inside: Vec<[bool; 3]>,
    inv_extent: Vector3<f64>,
    pub weights: Vec<Vec<f64>>,
}

pub const SKINNING_PREFIX: &str = "skinning";
pub const SKINNING_ACTIVATION: Activation = Activation::Softplus(100.0);

impl SkinningField {
    pub fn sizes(template: &SkinnedTemplate, width: usize, depth: usize) -> Vec<usize> {
        let mut s = vec![3];
        s.extend(std::iter::repeat_n(width, depth));
        s.push(template.num_joints() + 1);
        s
    }

    pub fn new(
        store: &mut ParamStore,
        template: &SkinnedTemplate,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            SKINNING_PREFIX,
            ParamClass::Skinning,
            &Self::sizes(template, width, depth),
            SKINNING_ACTIVATION,
            Activation::Identity,
            OutputInit::Scaled(0.01),
            rng,
        );
        Self::with_mlp(mlp, template)
    }

    pub fn attach(
        store: &ParamStore,
        template: &SkinnedTemplate,
        width: usize,
        depth: usize,
    ) -> Option<Self> {
        let mlp = Mlp::attach(
            store,
            SKINNING_PREFIX,
            &Self::sizes(template, width, depth),
            SKINNING_ACTIVATION,
            Activation::Identity,
        )?;
        Some(Self::with_mlp(mlp, template))
    }

    fn with_mlp(mlp: Mlp, template: &SkinnedTemplate) -> Self {
        Self {
            mlp,
            softmax: HierarchicalSoftmax::new(template),
            bbox: template.bbox,
            clamped: AtomicUsize::new(0),
        }
    }

    /// Number of queries that fell outside the bounding box so far.
    pub fn clamped_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn forward(&self, store: &ParamStore, points: &[Vector3<f64>]) -> SkinningCache {
        let n = points.len();
        let mut x = Array2::zeros((n, 3));
        let mut inside = Vec::with_capacity(n);
        let mut inv_extent = Vector3::zeros();
        let mut clamped = 0;
        for (i, p) in points.iter().enumerate() {
            let (u, ins, inv) = self.bbox.normalize(p);
            inv_extent = inv;
            if ins.iter().any(|v| !v) {
                clamped += 1;
            }
            for k in 0..3 {
                x[(i, k)] = u[k];
            }
            inside.push(ins);
        }
        if clamped > 0 {
            self.clamped.fetch_add(clamped, Ordering::Relaxed);
        }
        let mlp = self.mlp.forward(store, x.view());
        let (weights, hs): (Vec<_>, Vec<_>) = mlp
            .output()
            .rows()
            .into_iter()
            .map(|row| self.softmax.forward(row.as_slice().expect("row")))
            .unzip();
        SkinningCache {
            mlp,
            hs,
            inside,
            inv_extent,
            weights,
        }
    }

    /// Accumulates network gradients and returns `dL/dx` per query point.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &SkinningCache,
        grad_w: &[Vec<f64>],
    ) -> Vec<Vector3<f64>> {
        let n = grad_w.len();
        let mut d_logits = Array2::zeros((n, self.softmax.num_logits()));
        for i in 0..n {
            let d = self.softmax.backward(&cache.hs[i], &grad_w[i]);
            for (k, v) in d.into_iter().enumerate() {
                d_logits[(i, k)] = v;
            }
        }
        let dx = self.mlp.backward(store, &cache.mlp, d_logits.view());
        (0..n)
            .map(|i| {
                Vector3::from_fn(|k, _| {
                    if cache.inside[i][k] {
                        dx[(i, k)] * cache.inv_extent[k]
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    pub fn weights(&self, store: &ParamStore, points: &[Vector3<f64>]) -> Vec<Vec<f64>> {
        self.forward(store, points).weights
    }
}

/// `T = sum_b w_b B_b`.
pub fn lbs_transform(weights: &[f64], bones: &[RigidTransform]) -> RigidTransform {
    let mut t = RigidTransform::new(Matrix3::zeros(), Vector3::zeros());
    for (w, b) in weights.iter().zip(bones) {
        t.linear += b.linear * *w;
        t.translation += b.translation * *w;
    }
    t
}

/// Gradient of [`lbs_transform`] with respect to the weights; bone
/// gradients are accumulated into `grad_bones`.
pub fn lbs_transform_backward(
    weights: &[f64],
    bones: &[RigidTransform],
    grad_t: &RigidTransform,
    grad_bones: &mut [RigidTransform],
) -> Vec<f64> {
    bones
        .iter()
        .zip(weights)
        .zip(grad_bones.iter_mut())
        .map(|((b, w), gb)| {
            gb.linear += grad_t.linear * *w;
            gb.translation += grad_t.translation * *w;
            b.linear.component_mul(&grad_t.linear).sum() + b.translation.dot(&grad_t.translation)
        })
        .collect()
}

/// A gaussian after the rigid step: position, linear frame `T_{3x3} R_d`,
/// unchanged scale and the resulting covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedGaussian {
    pub position: Vector3<f64>,
    pub frame: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

pub fn apply_rigid(
    position: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    scale: &Vector3<f64>,
    t: &RigidTransform,
) -> ObservedGaussian {
    let frame = t.linear * rotation;
    ObservedGaussian {
        position: t.apply_point(position),
        frame,
        scale: *scale,
        covariance: covariance_from_linear(&frame, scale),
    }
}

/// Backward of [`apply_rigid`] given gradients on the observed position and
/// frame. Returns `(dT, dx_d, dR_d)`.
pub fn apply_rigid_backward(
    position: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    t: &RigidTransform,
    grad_position: &Vector3<f64>,
    grad_frame: &Matrix3<f64>,
) -> (RigidTransform, Vector3<f64>, Matrix3<f64>) {
    let dt = RigidTransform::new(
        grad_position * position.transpose() + grad_frame * rotation.transpose(),
        *grad_position,
    );
    (
        dt,
        t.linear.transpose() * grad_position,
        t.linear.transpose() * grad_frame,
    )
}

/// Evaluated skinning regularizer, kept around for its backward pass.
#[derive(Debug, Clone)]
pub struct SkinningLoss {
    pub value: f64,
    cache: SkinningCache,
    target: Vec<Vec<f64>>,
}

impl SkinningLoss {
    /// Mean over fresh area-weighted surface samples of `|f(x) - w_gt|^2`.
    pub fn evaluate(
        store: &ParamStore,
        field: &SkinningField,
        template: &SkinnedTemplate,
        n_samples: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let samples: Vec<_> = (0..n_samples)
            .map(|_| template.sample_surface(rng))
            .collect();
        let points: Vec<_> = samples.iter().map(|s| s.point).collect();
        let target: Vec<_> = samples
            .iter()
            .map(|s| template.interpolate_weights(s))
            .collect();
        Self::evaluate_at(store, field, &points, target)
    }

    pub fn evaluate_at(
        store: &ParamStore,
        field: &SkinningField,
        points: &[Vector3<f64>],
        target: Vec<Vec<f64>>,
    ) -> Self {
        let cache = field.forward(store, points);
        let n = points.len().max(1) as f64;
        let value = cache
            .weights
            .iter()
            .zip(&target)
            .map(|(w, t)| w.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        Self {
            value,
            cache,
            target,
        }
    }

    /// Accumulates `scale * dL/dtheta` into the skinning network gradients.
    pub fn backward(&self, store: &mut ParamStore, field: &SkinningField, scale: f64) {
        let n = self.target.len().max(1) as f64;
        let grad: Vec<Vec<f64>> = self
            .cache
            .weights
            .iter()
            .zip(&self.target)
            .map(|(w, t)| {
                w.iter()
                    .zip(t)
                    .map(|(a, b)| scale * 2.0 * (a - b) / n)
                    .collect()
            })
            .collect();
        field.backward(store, &self.cache, &grad);
    }
}
