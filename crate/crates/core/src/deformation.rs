//! Pose-dependent non-rigid deformation: multiresolution hash encoding of the
//! canonical position, a pose latent, and an MLP predicting offsets of
//! position, log-scale and rotation plus a local appearance feature.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::PoseParams;
use crate::geometry::{quat_mul, quat_mul_backward, quat_normalize_backward, Quat};
use crate::nn::{Activation, Mlp, MlpCache, OutputInit};
use crate::params::{ParamClass, ParamId, ParamStore};
use crate::template::{Aabb, SkinnedTemplate};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            log2_table_size: 16,
            base_resolution: 16,
            finest_resolution: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    resolution: usize,
    /// Number of table rows; equals `(resolution + 1)^3` when dense.
    size: usize,
    dense: bool,
    /// Offset (in scalars) of this level inside the flat table.
    offset: usize,
}

/// Multiresolution hash grid with trilinear interpolation per level.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    pub table: ParamId,
    levels: Vec<Level>,
}

/// Corner indices (into the flat table, in rows) and trilinear weights of
/// one point at every level, plus the data needed for `d/dx`.
#[derive(Debug, Clone)]
pub struct HashCache {
    corners: Vec<[usize; 8]>,
    weights: Vec<[f64; 8]>,
    frac: Vec<[f64; 3]>,
}

pub const HASH_TABLE_NAME: &str = "hashgrid.tables";

impl HashGrid {
    fn layout(config: &HashGridConfig) -> (Vec<Level>, usize) {
        let t = 1usize << config.log2_table_size;
        let growth = if config.levels > 1 {
            ((config.finest_resolution as f64).ln() - (config.base_resolution as f64).ln())
                / (config.levels - 1) as f64
        } else {
            0.0
        };
        let mut offset = 0;
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let resolution =
                ((config.base_resolution as f64) * (growth * l as f64).exp()).floor() as usize;
            let dense_size = (resolution + 1).pow(3);
            let dense = dense_size <= t;
            let size = if dense { dense_size } else { t };
            levels.push(Level {
                resolution,
                size,
                dense,
                offset,
            });
            offset += size * config.features_per_level;
        }
        (levels, offset)
    }

    pub fn new(store: &mut ParamStore, config: HashGridConfig, rng: &mut impl Rng) -> Self {
        let (levels, total) = Self::layout(&config);
        let data = (0..total).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let table = store.register(HASH_TABLE_NAME, ParamClass::HashGrid, data, 0);
        Self {
            config,
            table,
            levels,
        }
    }

    pub fn attach(store: &ParamStore, config: HashGridConfig) -> Option<Self> {
        let (levels, total) = Self::layout(&config);
        let table = store.find(HASH_TABLE_NAME)?;
        (store.value(table).len() == total).then_some(Self {
            config,
            table,
            levels,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.features_per_level
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.resolution).collect()
    }

    pub fn level_is_dense(&self, l: usize) -> bool {
        self.levels[l].dense
    }

    /// Row index (within level `l`) of integer grid vertex `v`.
    pub fn vertex_index(&self, l: usize, v: [usize; 3]) -> usize {
        let lv = &self.levels[l];
        if lv.dense {
            let s = lv.resolution + 1;
            v[0] + s * (v[1] + s * v[2])
        } else {
            let h = (v[0] as u32).wrapping_mul(PRIMES[0])
                ^ (v[1] as u32).wrapping_mul(PRIMES[1])
                ^ (v[2] as u32).wrapping_mul(PRIMES[2]);
            (h as usize) % lv.size
        }
    }

    /// Scalar offset of feature 0 of row `row` at level `l`.
    pub fn entry_offset(&self, l: usize, row: usize) -> usize {
        self.levels[l].offset + row * self.config.features_per_level
    }

    /// Encodes a point of the unit cube; inputs are clamped to `[0,1]^3`.
    pub fn encode(&self, store: &ParamStore, u: &Vector3<f64>, out: &mut [f64]) -> HashCache {
        let table = store.value(self.table);
        let f = self.config.features_per_level;
        let mut cache = HashCache {
            corners: Vec::with_capacity(self.levels.len()),
            weights: Vec::with_capacity(self.levels.len()),
            frac: Vec::with_capacity(self.levels.len()),
        };
        for (l, lv) in self.levels.iter().enumerate() {
            let n = lv.resolution;
            let mut base = [0usize; 3];
            let mut fr = [0.0; 3];
            for k in 0..3 {
                let p = u[k].clamp(0.0, 1.0) * n as f64;
                let c = (p.floor() as usize).min(n - 1);
                base[k] = c;
                fr[k] = p - c as f64;
            }
            let mut corners = [0usize; 8];
            let mut weights = [0.0; 8];
            for (c, (corner, weight)) in corners.iter_mut().zip(weights.iter_mut()).enumerate() {
                let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let v = [base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]];
                *corner = self.entry_offset(l, self.vertex_index(l, v));
                *weight = (0..3)
                    .map(|k| if bits[k] == 1 { fr[k] } else { 1.0 - fr[k] })
                    .product();
            }
            for j in 0..f {
                out[l * f + j] = corners
                    .iter()
                    .zip(&weights)
                    .map(|(c, w)| w * table[c + j])
                    .sum();
            }
            cache.corners.push(corners);
            cache.weights.push(weights);
            cache.frac.push(fr);
        }
        cache
    }

    /// Accumulates table gradients and returns `dL/du` (in unit-cube coordinates).
    pub fn encode_backward(
        &self,
        store: &mut ParamStore,
        cache: &HashCache,
        grad_out: &[f64],
    ) -> Vector3<f64> {
        let f = self.config.features_per_level;
        let mut du = Vector3::zeros();
        let param = store.param_mut(self.table);
        for (l, lv) in self.levels.iter().enumerate() {
            let corners = &cache.corners[l];
            let weights = &cache.weights[l];
            let fr = cache.frac[l];
            for j in 0..f {
                let g = grad_out[l * f + j];
                if g == 0.0 {
                    continue;
                }
                for c in 0..8 {
                    param.grad[corners[c] + j] += g * weights[c];
                    let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                    let val = param.value[corners[c] + j];
                    for k in 0..3 {
                        // d weight / d frac_k
                        let mut dw = if bits[k] == 1 { 1.0 } else { -1.0 };
                        for m in 0..3 {
                            if m != k {
                                dw *= if bits[m] == 1 { fr[m] } else { 1.0 - fr[m] };
                            }
                        }
                        du[k] += g * val * dw * lv.resolution as f64;
                    }
                }
            }
        }
        du
    }
}

/// Stand-in hierarchical pose encoder: each joint's local rotation passes
/// through a shared linear map, embeddings are summed along ancestor chains,
/// averaged over joints and squashed with `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    parents: Vec<Option<usize>>,
    order: Vec<usize>,
    subtree: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PoseEncoding {
    pub latent: Vec<f64>,
    unit: Vec<Quat>,
}

impl PoseEncoder {
    pub fn new(
        store: &mut ParamStore,
        template: &SkinnedTemplate,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0f64 / 4.0).sqrt();
        let w = (0..dim * 4)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.register("pose_encoder.weight", ParamClass::NonRigid, w, 0);
        let bias = store.register("pose_encoder.bias", ParamClass::NonRigid, vec![0.0; dim], 0);
        Self::build(weight, bias, dim, template)
    }

    pub fn attach(store: &ParamStore, template: &SkinnedTemplate, dim: usize) -> Option<Self> {
        Some(Self::build(
            store.find("pose_encoder.weight")?,
            store.find("pose_encoder.bias")?,
            dim,
            template,
        ))
    }

    fn build(weight: ParamId, bias: ParamId, dim: usize, template: &SkinnedTemplate) -> Self {
        let b = template.num_joints();
        let mut subtree = vec![1usize; b];
        for &j in template.topo_order().iter().rev() {
            if let Some(p) = template.parents[j] {
                subtree[p] += subtree[j];
            }
        }
        Self {
            weight,
            bias,
            dim,
            parents: template.parents.clone(),
            order: template.topo_order().to_vec(),
            subtree,
        }
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        pose: &PoseParams,
    ) -> crate::error::Result<PoseEncoding> {
        let w = store.value(self.weight);
        let bias = store.value(self.bias);
        let b = self.parents.len();
        let mut unit = vec![Quat::identity(); b];
        let mut acc = vec![vec![0.0; self.dim]; b];
        let mut mean = vec![0.0; self.dim];
        for &j in &self.order {
            let q = pose.local(j).normalize()?;
            unit[j] = q;
            let qa = q.to_array();
            for d in 0..self.dim {
                let h: f64 = bias[d] + (0..4).map(|k| w[d * 4 + k] * qa[k]).sum::<f64>();
                acc[j][d] = h + self.parents[j].map_or(0.0, |p| acc[p][d]);
            }
            for d in 0..self.dim {
                mean[d] += acc[j][d] / b as f64;
            }
        }
        Ok(PoseEncoding {
            latent: mean.iter().map(|v| v.tanh()).collect(),
            unit,
        })
    }

    /// Accumulates encoder gradients; returns gradients on the raw local quaternions.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        pose: &PoseParams,
        enc: &PoseEncoding,
        grad_latent: &[f64],
    ) -> Vec<Quat> {
        let b = self.parents.len();
        let dpre: Vec<f64> = enc
            .latent
            .iter()
            .zip(grad_latent)
            .map(|(z, g)| g * (1.0 - z * z) / b as f64)
            .collect();
        let w = store.value(self.weight).to_vec();
        let mut dw = vec![0.0; self.dim * 4];
        let mut db = vec![0.0; self.dim];
        let mut out = Vec::with_capacity(b);
        for j in 0..b {
            let k = self.subtree[j] as f64;
            let qa = enc.unit[j].to_array();
            let mut dq = [0.0; 4];
            for d in 0..self.dim {
                let dh = dpre[d] * k;
                db[d] += dh;
                for c in 0..4 {
                    dw[d * 4 + c] += dh * qa[c];
                    dq[c] += dh * w[d * 4 + c];
                }
            }
            out.push(quat_normalize_backward(pose.local(j), Quat::from_array(dq)));
        }
        store.accumulate(self.weight, &dw);
        store.accumulate(self.bias, &db);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonRigidConfig {
    pub depth: usize,
    pub width: usize,
    pub pose_dim: usize,
    pub feature_dim: usize,
}

impl Default for NonRigidConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 128,
            pose_dim: 64,
            feature_dim: 16,
        }
    }
}

/// Canonical gaussian attributes consumed by [`NonRigidField::deform`].
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalAttrs {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Raw (unnormalized) rotations.
    pub rotations: Vec<Quat>,
}

/// Gaussians after the non-rigid step, plus the per-gaussian feature `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGaussians {
    pub positions: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    /// Unit rotations.
    pub rotations: Vec<Quat>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DeformCache {
    enabled: bool,
    hash: Vec<HashCache>,
    mlp: Option<MlpCache>,
    pose: Option<PoseEncoding>,
    inside: Vec<[bool; 3]>,
    inv_extent: Vector3<f64>,
    unit_canonical: Vec<Quat>,
    delta_q_raw: Vec<Quat>,
    delta_q_unit: Vec<Quat>,
}

/// Gradients flowing into the canonical attributes and the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrad {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    /// `None` when the field was disabled.
    pub local_rotations: Option<Vec<Quat>>,
}

/// Test hook: deliberately corrupt one backward path.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BackwardFaults {
    pub flip_delta_scale: bool,
}

#[derive(Debug, Clone)]
pub struct NonRigidField {
    pub config: NonRigidConfig,
    pub grid: HashGrid,
    pub encoder: PoseEncoder,
    pub mlp: Mlp,
    pub bbox: Aabb,
}

const NONRIGID_PREFIX: &str = "nonrigid";

impl NonRigidField {
    fn sizes(config: &NonRigidConfig, grid_dim: usize) -> Vec<usize> {
        let mut s = vec![grid_dim + config.pose_dim];
        s.extend(std::iter::repeat_n(config.width, config.depth));
        s.push(9 + config.feature_dim);
        s
    }

    pub fn new(
        store: &mut ParamStore,
        template: &SkinnedTemplate,
        config: NonRigidConfig,
        grid: HashGridConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let grid = HashGrid::new(store, grid, rng);
        let encoder = PoseEncoder::new(store, template, config.pose_dim, rng);
        let mlp = Mlp::new(
            store,
            NONRIGID_PREFIX,
            ParamClass::NonRigid,
            &Self::sizes(&config, grid.output_dim()),
            Activation::Relu,
            Activation::Identity,
            OutputInit::Zero,
            rng,
        );
        Self {
            config,
            grid,
            encoder,
            mlp,
            bbox: template.bbox,
        }
    }

    pub fn attach(
        store: &ParamStore,
        template: &SkinnedTemplate,
        config: NonRigidConfig,
        grid: HashGridConfig,
    ) -> Option<Self> {
        let grid = HashGrid::attach(store, grid)?;
        let encoder = PoseEncoder::attach(store, template, config.pose_dim)?;
        let mlp = Mlp::attach(
            store,
            NONRIGID_PREFIX,
            &Self::sizes(&config, grid.output_dim()),
            Activation::Relu,
            Activation::Identity,
        )?;
        Some(Self {
            config,
            grid,
            encoder,
            mlp,
            bbox: template.bbox,
        })
    }

    /// Applies `x_d = x_c + dx`, `s_d = s_c exp(ds)`,
    /// `q_d = q_c * normalize([1, dq])`. When `enabled` is false the offsets
    /// and features are zero and the network is not evaluated.
    pub fn deform(
        &self,
        store: &ParamStore,
        canonical: &CanonicalAttrs,
        pose: &PoseParams,
        enabled: bool,
    ) -> crate::error::Result<(DeformedGaussians, DeformCache)> {
        let n = canonical.positions.len();
        let fdim = self.config.feature_dim;
        let unit_canonical = canonical
            .rotations
            .iter()
            .map(|q| q.normalize())
            .collect::<crate::error::Result<Vec<_>>>()?;
        if !enabled {
            let out = DeformedGaussians {
                positions: canonical.positions.clone(),
                scales: canonical
                    .log_scales
                    .iter()
                    .map(|l| l.map(f64::exp))
                    .collect(),
                rotations: unit_canonical.clone(),
                features: vec![vec![0.0; fdim]; n],
            };
            let cache = DeformCache {
                enabled,
                hash: Vec::new(),
                mlp: None,
                pose: None,
                inside: Vec::new(),
                inv_extent: Vector3::zeros(),
                unit_canonical,
                delta_q_raw: Vec::new(),
                delta_q_unit: Vec::new(),
            };
            return Ok((out, cache));
        }
        let enc = self.encoder.encode(store, pose)?;
        let gdim = self.grid.output_dim();
        let mut input = Array2::zeros((n, gdim + self.config.pose_dim));
        let mut hash = Vec::with_capacity(n);
        let mut inside = Vec::with_capacity(n);
        let mut inv_extent = Vector3::zeros();
        let mut buf = vec![0.0; gdim];
        for (i, x) in canonical.positions.iter().enumerate() {
            let (u, ins, inv) = self.bbox.normalize(x);
            inv_extent = inv;
            hash.push(self.grid.encode(store, &u, &mut buf));
            inside.push(ins);
            for k in 0..gdim {
                input[(i, k)] = buf[k];
            }
            for k in 0..self.config.pose_dim {
                input[(i, gdim + k)] = enc.latent[k];
            }
        }
        let mlp = self.mlp.forward(store, input.view());
        let o = mlp.output();
        let mut out = DeformedGaussians {
            positions: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            features: Vec::with_capacity(n),
        };
        let mut delta_q_raw = Vec::with_capacity(n);
        let mut delta_q_unit = Vec::with_capacity(n);
        for i in 0..n {
            let dx = Vector3::new(o[(i, 0)], o[(i, 1)], o[(i, 2)]);
            let ds = Vector3::new(o[(i, 3)], o[(i, 4)], o[(i, 5)]);
            let dq = Quat::new(1.0, o[(i, 6)], o[(i, 7)], o[(i, 8)]);
            let dqu = dq.normalize()?;
            out.positions.push(canonical.positions[i] + dx);
            out.scales
                .push((canonical.log_scales[i] + ds).map(f64::exp));
            out.rotations.push(quat_mul(unit_canonical[i], dqu));
            out.features
                .push((0..fdim).map(|k| o[(i, 9 + k)]).collect());
            delta_q_raw.push(dq);
            delta_q_unit.push(dqu);
        }
        let cache = DeformCache {
            enabled,
            hash,
            mlp: Some(mlp),
            pose: Some(enc),
            inside,
            inv_extent,
            unit_canonical,
            delta_q_raw,
            delta_q_unit,
        };
        Ok((out, cache))
    }

    /// Backward of [`Self::deform`]. Gradients are with respect to the
    /// deformed positions, scales (not log-scales), unit rotations and features.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_backward(
        &self,
        store: &mut ParamStore,
        canonical: &CanonicalAttrs,
        pose: &PoseParams,
        deformed: &DeformedGaussians,
        cache: &DeformCache,
        grad_pos: &[Vector3<f64>],
        grad_scale: &[Vector3<f64>],
        grad_rot: &[Quat],
        grad_feat: &[Vec<f64>],
        faults: BackwardFaults,
    ) -> DeformGrad {
        let n = canonical.positions.len();
        let mut out = DeformGrad {
            positions: grad_pos.to_vec(),
            log_scales: (0..n)
                .map(|i| grad_scale[i].component_mul(&deformed.scales[i]))
                .collect(),
            rotations: Vec::with_capacity(n),
            local_rotations: None,
        };
        if !cache.enabled {
            for i in 0..n {
                out.rotations
                    .push(quat_normalize_backward(canonical.rotations[i], grad_rot[i]));
            }
            return out;
        }
        let fdim = self.config.feature_dim;
        let mut d_out = Array2::zeros((n, 9 + fdim));
        for i in 0..n {
            let (dqc, ddq) =
                quat_mul_backward(cache.unit_canonical[i], cache.delta_q_unit[i], grad_rot[i]);
            out.rotations
                .push(quat_normalize_backward(canonical.rotations[i], dqc));
            let ddq_raw = quat_normalize_backward(cache.delta_q_raw[i], ddq);
            let ds_sign = if faults.flip_delta_scale { -1.0 } else { 1.0 };
            for k in 0..3 {
                d_out[(i, k)] = grad_pos[i][k];
                d_out[(i, 3 + k)] = ds_sign * out.log_scales[i][k];
            }
            d_out[(i, 6)] = ddq_raw.x;
            d_out[(i, 7)] = ddq_raw.y;
            d_out[(i, 8)] = ddq_raw.z;
            for k in 0..fdim {
                d_out[(i, 9 + k)] = grad_feat[i][k];
            }
        }
        let mlp_cache = cache.mlp.as_ref().expect("enabled cache has mlp");
        let d_in = self.mlp.backward(store, mlp_cache, d_out.view());
        let gdim = self.grid.output_dim();
        let mut d_latent = vec![0.0; self.config.pose_dim];
        let mut gbuf = vec![0.0; gdim];
        for i in 0..n {
            for k in 0..gdim {
                gbuf[k] = d_in[(i, k)];
            }
            let du = self.grid.encode_backward(store, &cache.hash[i], &gbuf);
            for k in 0..3 {
                if cache.inside[i][k] {
                    out.positions[i][k] += du[k] * cache.inv_extent[k];
                }
            }
            for k in 0..self.config.pose_dim {
                d_latent[k] += d_in[(i, gdim + k)];
            }
        }
        let enc = cache.pose.as_ref().expect("enabled cache has pose");
        out.local_rotations = Some(self.encoder.backward(store, pose, enc, &d_latent));
        out
    }
}
