//! Canonical gaussian set: initialization from a template surface,
//! adaptive densification and pruning, and its home in the [`ParamStore`].

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deformation::CanonicalAttrs;
use crate::error::{Error, Result};
use crate::geometry::{logit, sigmoid, unit_quat_to_rotmat, Quat};
use crate::knn::{knn_build, KnnGraph, DEFAULT_K};
use crate::params::{ParamClass, ParamId, ParamStore};
use crate::template::SkinnedTemplate;

pub const FEATURE_DIM: usize = 32;
pub const INIT_OPACITY: f64 = 0.1;
/// Child scale divisor when splitting.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Plain-data copy of every canonical gaussian attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Stored unnormalized; normalized on use.
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    /// `len * feature_dim` values.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl GaussianSet {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            features: Vec::new(),
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn knn(&self, k: usize) -> KnnGraph {
        knn_build(&self.positions, k)
    }

    pub fn canonical_attrs(&self) -> CanonicalAttrs {
        CanonicalAttrs {
            positions: self.positions.clone(),
            log_scales: self.log_scales.clone(),
            rotations: self.rotations.clone(),
        }
    }

    /// `n` area-weighted surface samples with isotropic scale equal to the
    /// mean nearest-neighbor distance, identity rotation, opacity 0.1 and
    /// zero features.
    pub fn init_from_template(
        template: &SkinnedTemplate,
        n: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if template.triangles.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        let positions: Vec<Vector3<f64>> =
            (0..n).map(|_| template.sample_surface(rng).point).collect();
        let spacing = if n >= 2 {
            let g = knn_build(&positions, 1);
            let d: f64 = (0..n)
                .map(|i| (positions[i] - positions[g.neighbors(i)[0]]).norm())
                .sum();
            (d / n as f64).max(1e-6)
        } else {
            (template.total_area()).sqrt().max(1e-3)
        };
        Ok(Self {
            log_scales: vec![Vector3::repeat(spacing.ln()); n],
            rotations: vec![Quat::identity(); n],
            opacity_logits: vec![logit(INIT_OPACITY); n],
            features: vec![0.0; n * feature_dim],
            feature_dim,
            positions,
        })
    }
}

/// Handles of the five per-gaussian tensors inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTensors {
    pub position: ParamId,
    pub log_scale: ParamId,
    pub rotation: ParamId,
    pub opacity: ParamId,
    pub feature: ParamId,
    pub feature_dim: usize,
}

impl GaussianTensors {
    pub const NAMES: [&'static str; 5] = [
        "gaussians.position",
        "gaussians.log_scale",
        "gaussians.rotation",
        "gaussians.opacity_logit",
        "gaussians.feature",
    ];

    pub fn register(store: &mut ParamStore, set: &GaussianSet) -> Self {
        let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let [pn, sn, rn, on, fnm] = Self::NAMES;
        Self {
            position: store.register(pn, ParamClass::GaussianPosition, flat3(&set.positions), 3),
            log_scale: store.register(sn, ParamClass::GaussianScale, flat3(&set.log_scales), 3),
            rotation: store.register(
                rn,
                ParamClass::GaussianRotation,
                set.rotations.iter().flat_map(|q| q.to_array()).collect(),
                4,
            ),
            opacity: store.register(
                on,
                ParamClass::GaussianOpacity,
                set.opacity_logits.clone(),
                1,
            ),
            feature: store.register(
                fnm,
                ParamClass::GaussianFeature,
                set.features.clone(),
                set.feature_dim,
            ),
            feature_dim: set.feature_dim,
        }
    }

    pub fn attach(store: &ParamStore) -> Option<Self> {
        let [pn, sn, rn, on, fnm] = Self::NAMES;
        let feature = store.find(fnm)?;
        Some(Self {
            position: store.find(pn)?,
            log_scale: store.find(sn)?,
            rotation: store.find(rn)?,
            opacity: store.find(on)?,
            feature,
            feature_dim: store.param(feature).row_width,
        })
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [
            self.position,
            self.log_scale,
            self.rotation,
            self.opacity,
            self.feature,
        ]
    }

    pub fn len(&self, store: &ParamStore) -> usize {
        store.value(self.opacity).len()
    }

    pub fn snapshot(&self, store: &ParamStore) -> GaussianSet {
        let v3 = |id| {
            store
                .value(id)
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect()
        };
        GaussianSet {
            positions: v3(self.position),
            log_scales: v3(self.log_scale),
            rotations: store
                .value(self.rotation)
                .chunks_exact(4)
                .map(Quat::from_slice)
                .collect(),
            opacity_logits: store.value(self.opacity).to_vec(),
            features: store.value(self.feature).to_vec(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn canonical_attrs(&self, store: &ParamStore) -> CanonicalAttrs {
        let v3 = |id| {
            store
                .value(id)
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect()
        };
        CanonicalAttrs {
            positions: v3(self.position),
            log_scales: v3(self.log_scale),
            rotations: store
                .value(self.rotation)
                .chunks_exact(4)
                .map(Quat::from_slice)
                .collect(),
        }
    }

    fn retain(&self, store: &mut ParamStore, keep: &[bool]) {
        for id in self.ids() {
            store.retain_rows(id, keep);
        }
    }

    fn append(&self, store: &mut ParamStore, set: &GaussianSet) {
        let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        store.append_rows(self.position, &flat3(&set.positions));
        store.append_rows(self.log_scale, &flat3(&set.log_scales));
        store.append_rows(
            self.rotation,
            &set.rotations
                .iter()
                .flat_map(|q| q.to_array())
                .collect::<Vec<_>>(),
        );
        store.append_rows(self.opacity, &set.opacity_logits);
        store.append_rows(self.feature, &set.features);
    }
}

/// Running view-space gradient statistics between densification events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, view_grad_norm: &[f64], visible: &[bool]) {
        for i in 0..self.grad_sum.len() {
            if visible[i] {
                self.grad_sum[i] += view_grad_norm[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub grad_threshold: f64,
    pub min_opacity: f64,
    pub interval: usize,
    /// Fraction of the run after which densification stops.
    pub stop_fraction: f64,
    /// Clone (rather than split) when the largest scale is at most this fraction of the scene extent.
    pub percent_dense: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            interval: 100,
            stop_fraction: 0.6,
            percent_dense: 0.01,
            max_gaussians: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub total: usize,
}

/// Clones small high-gradient gaussians, splits large ones into two
/// children (scale / 1.6, positions drawn from the parent), removes
/// low-opacity ones and keeps optimizer rows aligned. Clones and their source
/// share the opacity as `1 - sqrt(1 - alpha)` each, preserving coverage.
pub fn densify_and_prune(
    store: &mut ParamStore,
    tensors: &GaussianTensors,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    let set = tensors.snapshot(store);
    let n = set.len();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| stats.mean(i) >= cfg.grad_threshold && stats.count[i] > 0)
        .collect();
    candidates.sort_by(|a, b| stats.mean(*b).total_cmp(&stats.mean(*a)).then(a.cmp(b)));
    let clone_limit = cfg.percent_dense * scene_extent;
    // Each clone adds one gaussian; each split adds one net (two children, parent removed).
    let budget = cfg.max_gaussians.saturating_sub(n);
    candidates.truncate(budget);
    candidates.sort_unstable();

    let mut new = GaussianSet::empty(set.feature_dim);
    let mut keep = vec![true; n];
    let mut opacity_update: Vec<Option<f64>> = vec![None; n];
    let mut report = DensifyReport::default();
    for &i in &candidates {
        let scale = set.scale(i);
        if scale.max() <= clone_limit {
            let a = set.opacity(i);
            let shared = logit(1.0 - (1.0 - a).sqrt());
            opacity_update[i] = Some(shared);
            new.positions.push(set.positions[i]);
            new.log_scales.push(set.log_scales[i]);
            new.rotations.push(set.rotations[i]);
            new.opacity_logits.push(shared);
            new.features.extend_from_slice(set.feature(i));
            report.cloned += 1;
        } else {
            let r = unit_quat_to_rotmat(set.rotations[i].normalize()?);
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let offset: Vector3<f64> = r * scale.component_mul(&z);
                new.positions.push(set.positions[i] + offset);
                new.log_scales
                    .push((scale / SPLIT_SCALE_DIVISOR).map(f64::ln));
                new.rotations.push(set.rotations[i]);
                new.opacity_logits.push(set.opacity_logits[i]);
                new.features.extend_from_slice(set.feature(i));
            }
            keep[i] = false;
            report.split += 1;
        }
    }
    let threshold = logit(cfg.min_opacity);
    let mut survivors = 0;
    for i in 0..n {
        let logit_now = opacity_update[i].unwrap_or(set.opacity_logits[i]);
        if keep[i] && logit_now < threshold {
            keep[i] = false;
            report.pruned += 1;
        }
        survivors += keep[i] as usize;
    }
    let new_keep: Vec<bool> = new.opacity_logits.iter().map(|l| *l >= threshold).collect();
    report.pruned += new_keep.iter().filter(|k| !**k).count();
    survivors += new_keep.iter().filter(|k| **k).count();
    if survivors == 0 {
        return Err(Error::DegenerateScene);
    }
    for (i, v) in opacity_update.iter().enumerate() {
        if let Some(v) = v {
            store.value_mut(tensors.opacity)[i] = *v;
        }
    }
    tensors.append(store, &new);
    let mut all_keep = keep;
    all_keep.extend(new_keep);
    tensors.retain(store, &all_keep);
    report.total = tensors.len(store);
    debug_assert!(report.total <= cfg.max_gaussians.max(n));
    Ok(report)
}

/// Mean distance to the scene center over the largest canonical extent, used
/// to scale position learning rates and the clone/split threshold.
pub fn scene_extent(positions: &[Vector3<f64>]) -> f64 {
    if positions.is_empty() {
        return 1.0;
    }
    let c = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
    positions
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0, f64::max)
        .max(1e-6)
}

/// Default neighbor count for the AIAP graph.
pub const AIAP_K: usize = DEFAULT_K;
