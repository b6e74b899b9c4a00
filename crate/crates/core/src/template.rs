//! Skinned template: kinematic tree plus a surface mesh with ground-truth
//! skinning weights. Stands in for a parametric body model.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box used to normalize canonical coordinates into `[0,1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    /// Normalized coordinates clamped to the unit cube, a per-axis mask of
    /// which components stayed inside, and the per-axis scale `1/extent`.
    pub fn normalize(&self, p: &Vector3<f64>) -> (Vector3<f64>, [bool; 3], Vector3<f64>) {
        let ext = self.extent();
        let inv = Vector3::new(1.0 / ext.x, 1.0 / ext.y, 1.0 / ext.z);
        let mut u = (p - self.min).component_mul(&inv);
        let mut inside = [true; 3];
        for k in 0..3 {
            if u[k] < 0.0 {
                u[k] = 0.0;
                inside[k] = false;
            } else if u[k] > 1.0 {
                u[k] = 1.0;
                inside[k] = false;
            }
        }
        (u, inside, inv)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JointJson {
    pub name: String,
    /// Index of the parent joint, `-1` for the root.
    pub parent: i64,
    pub rest_position: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshJson {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// One row of `B` weights per vertex.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemplateJson {
    pub joints: Vec<JointJson>,
    pub mesh: MeshJson,
    /// Per-axis padding of the canonical bounding box, as a fraction of
    /// that axis' extent.
    #[serde(default = "default_padding")]
    pub bbox_padding: f64,
}

fn default_padding() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedTemplate {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub weights: Vec<Vec<f64>>,
    pub bbox: Aabb,
    pub bbox_padding: f64,
    children: Vec<Vec<usize>>,
    order: Vec<usize>,
    cumulative_area: Vec<f64>,
}

/// A surface sample with its source triangle and barycentric coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vector3<f64>,
    pub triangle: usize,
    pub bary: [f64; 3],
}

impl SkinnedTemplate {
    pub fn from_json(doc: TemplateJson) -> Result<Self> {
        let b = doc.joints.len();
        if b == 0 {
            return Err(Error::InvalidTemplate("no joints".into()));
        }
        let mut parents = Vec::with_capacity(b);
        for (i, j) in doc.joints.iter().enumerate() {
            parents.push(match j.parent {
                -1 => None,
                p if p >= 0 && (p as usize) < b && p as usize != i => Some(p as usize),
                p => {
                    return Err(Error::InvalidTemplate(format!(
                        "joint {i} has invalid parent {p}"
                    )))
                }
            });
        }
        let tpl = Self::new(
            doc.joints.iter().map(|j| j.name.clone()).collect(),
            parents,
            doc.joints
                .iter()
                .map(|j| Vector3::from(j.rest_position))
                .collect(),
            doc.mesh
                .vertices
                .iter()
                .map(|v| Vector3::from(*v))
                .collect(),
            doc.mesh.triangles.clone(),
            doc.mesh.weights.clone(),
            doc.bbox_padding,
        )?;
        Ok(tpl)
    }

    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_joints: Vec<Vector3<f64>>,
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        weights: Vec<Vec<f64>>,
        bbox_padding: f64,
    ) -> Result<Self> {
        let b = parents.len();
        if rest_joints.len() != b || joint_names.len() != b {
            return Err(Error::InvalidTemplate(
                "joint arrays differ in length".into(),
            ));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidTemplate(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        let order = topological_order(&parents)?;
        let mut children = vec![Vec::new(); b];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        if triangles.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        if weights.len() != vertices.len() {
            return Err(Error::InvalidTemplate(
                "one weight row per vertex required".into(),
            ));
        }
        for (v, row) in weights.iter().enumerate() {
            if row.len() != b {
                return Err(Error::InvalidTemplate(format!(
                    "vertex {v} has {} weights, expected {b}",
                    row.len()
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidTemplate(format!(
                    "vertex {v} weights must lie in [0,1] and sum to 1 (sum {s})"
                )));
            }
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidTemplate("triangle index out of range".into()));
            }
        }
        let mut lo = vertices[0];
        let mut hi = vertices[0];
        for v in &vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let pad = (hi - lo) * bbox_padding;
        let pad = pad.map(|p| p.max(1e-3));
        let bbox = Aabb {
            min: lo - pad,
            max: hi + pad,
        };
        let mut cumulative_area = Vec::with_capacity(triangles.len());
        let mut acc = 0.0;
        for t in &triangles {
            acc += triangle_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            cumulative_area.push(acc);
        }
        Ok(Self {
            joint_names,
            parents,
            rest_joints,
            vertices,
            triangles,
            weights,
            bbox,
            bbox_padding,
            children,
            order,
            cumulative_area,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_json(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> TemplateJson {
        TemplateJson {
            joints: (0..self.num_joints())
                .map(|i| JointJson {
                    name: self.joint_names[i].clone(),
                    parent: self.parents[i].map_or(-1, |p| p as i64),
                    rest_position: self.rest_joints[i].into(),
                })
                .collect(),
            mesh: MeshJson {
                vertices: self.vertices.iter().map(|v| (*v).into()).collect(),
                triangles: self.triangles.clone(),
                weights: self.weights.clone(),
            },
            bbox_padding: self.bbox_padding,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("template serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    /// Joints ordered so every parent precedes its children.
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn total_area(&self) -> f64 {
        *self.cumulative_area.last().unwrap_or(&0.0)
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let tri = self.triangles[t];
        triangle_area(
            &self.vertices[tri[0]],
            &self.vertices[tri[1]],
            &self.vertices[tri[2]],
        )
    }

    /// Area-weighted uniform sample on the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> SurfaceSample {
        let total = self.total_area();
        let r: f64 = rng.random_range(0.0..total);
        let t = self
            .cumulative_area
            .partition_point(|&a| a <= r)
            .min(self.triangles.len() - 1);
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let su = u.sqrt();
        let bary = [1.0 - su, su * (1.0 - v), su * v];
        let tri = self.triangles[t];
        let point = self.vertices[tri[0]] * bary[0]
            + self.vertices[tri[1]] * bary[1]
            + self.vertices[tri[2]] * bary[2];
        SurfaceSample {
            point,
            triangle: t,
            bary,
        }
    }

    /// Ground-truth weights at a surface sample by barycentric interpolation.
    pub fn interpolate_weights(&self, s: &SurfaceSample) -> Vec<f64> {
        let tri = self.triangles[s.triangle];
        (0..self.num_joints())
            .map(|b| (0..3).map(|k| s.bary[k] * self.weights[tri[k]][b]).sum())
            .collect()
    }

    /// Distance from `p` to the closest point of the mesh with vertices
    /// replaced by `verts` (e.g. a posed copy).
    pub fn distance_to_surface(&self, verts: &[Vector3<f64>], p: &Vector3<f64>) -> f64 {
        self.triangles
            .iter()
            .map(|t| point_triangle_distance(p, &verts[t[0]], &verts[t[1]], &verts[t[2]]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let b = parents.len();
    let mut depth = vec![usize::MAX; b];
    for start in 0..b {
        let mut chain = Vec::new();
        let mut j = start;
        loop {
            if depth[j] != usize::MAX {
                break;
            }
            if chain.contains(&j) {
                return Err(Error::CyclicSkeleton(j));
            }
            chain.push(j);
            match parents[j] {
                Some(p) => j = p,
                None => {
                    depth[j] = 0;
                    chain.pop();
                    break;
                }
            }
        }
        for &c in chain.iter().rev() {
            depth[c] = depth[parents[c].expect("non-root")] + 1;
        }
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok(order)
}

pub fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Exact point-to-triangle distance (Ericson, "Real-Time Collision Detection").
pub fn point_triangle_distance(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Parameters of a capsule chain along +y: `bones` segments of `segment`
/// length and `radius`, with smooth weight blending near interior joints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleChain {
    pub bones: usize,
    pub segment: f64,
    pub radius: f64,
    pub around: usize,
    pub rings_per_segment: usize,
    pub cap_rings: usize,
    /// Half-width of the weight blending zone around each interior joint.
    pub blend: f64,
}

impl Default for CapsuleChain {
    fn default() -> Self {
        Self {
            bones: 2,
            segment: 0.8,
            radius: 0.25,
            around: 16,
            rings_per_segment: 8,
            cap_rings: 4,
            blend: 0.12,
        }
    }
}

impl CapsuleChain {
    pub fn build(&self) -> Result<SkinnedTemplate> {
        if self.bones == 0 {
            return Err(Error::InvalidTemplate("capsule chain needs a bone".into()));
        }
        let length = self.segment * self.bones as f64;
        let r = self.radius;
        // Profile: (height, ring radius) from bottom pole to top pole.
        let mut profile: Vec<(f64, f64)> = Vec::new();
        for i in 0..self.cap_rings {
            let t = std::f64::consts::FRAC_PI_2 * (i as f64 / self.cap_rings as f64);
            profile.push((-r * t.cos(), r * t.sin()));
        }
        let n_body = self.rings_per_segment * self.bones;
        for i in 0..=n_body {
            profile.push((length * i as f64 / n_body as f64, r));
        }
        for i in (0..self.cap_rings).rev() {
            let t = std::f64::consts::FRAC_PI_2 * (i as f64 / self.cap_rings as f64);
            profile.push((length + r * t.cos(), r * t.sin()));
        }
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut ring_start = Vec::new();
        for (k, &(h, rr)) in profile.iter().enumerate() {
            let pole = rr < 1e-12;
            ring_start.push(vertices.len());
            if pole {
                vertices.push(Vector3::new(0.0, h, 0.0));
            } else {
                for a in 0..self.around {
                    let phi = std::f64::consts::TAU * a as f64 / self.around as f64;
                    vertices.push(Vector3::new(rr * phi.cos(), h, rr * phi.sin()));
                }
            }
            if k > 0 {
                let prev_pole = profile[k - 1].1 < 1e-12;
                let p0 = ring_start[k - 1];
                let c0 = ring_start[k];
                let n = self.around;
                for a in 0..n {
                    let a1 = (a + 1) % n;
                    match (prev_pole, pole) {
                        (true, false) => triangles.push([p0, c0 + a1, c0 + a]),
                        (false, true) => triangles.push([p0 + a, p0 + a1, c0]),
                        (false, false) => {
                            triangles.push([p0 + a, p0 + a1, c0 + a1]);
                            triangles.push([p0 + a, c0 + a1, c0 + a]);
                        }
                        (true, true) => {}
                    }
                }
            }
        }
        let weights = vertices
            .iter()
            .map(|v| self.weights_at_height(v.y))
            .collect();
        let joints: Vec<Vector3<f64>> = (0..self.bones)
            .map(|j| Vector3::new(0.0, self.segment * j as f64, 0.0))
            .collect();
        let parents = (0..self.bones)
            .map(|j| if j == 0 { None } else { Some(j - 1) })
            .collect();
        let names = (0..self.bones).map(|j| format!("bone{j}")).collect();
        SkinnedTemplate::new(names, parents, joints, vertices, triangles, weights, 0.2)
    }

    /// Ground-truth weights as a function of height along the chain.
    pub fn weights_at_height(&self, h: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.bones];
        let seg = ((h / self.segment).floor().max(0.0) as usize).min(self.bones - 1);
        w[seg] = 1.0;
        for j in 1..self.bones {
            let y = self.segment * j as f64;
            if (h - y).abs() < self.blend {
                let t = (h - (y - self.blend)) / (2.0 * self.blend);
                let s = t * t * (3.0 - 2.0 * t);
                w.iter_mut().for_each(|v| *v = 0.0);
                w[j - 1] = 1.0 - s;
                w[j] = s;
            }
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square() -> SkinnedTemplate {
        SkinnedTemplate::new(
            vec!["root".into()],
            vec![None],
            vec![Vector3::zeros()],
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![vec![1.0]; 4],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn rejects_cycles_and_bad_weights() {
        let r = topological_order(&[Some(1), Some(0)]);
        assert!(matches!(r, Err(Error::CyclicSkeleton(_))));
        let r = SkinnedTemplate::new(
            vec!["a".into()],
            vec![None],
            vec![Vector3::zeros()],
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![[0, 1, 2]],
            vec![vec![0.5], vec![1.0], vec![1.0]],
            0.1,
        );
        assert!(matches!(r, Err(Error::InvalidTemplate(_))));
        let r = SkinnedTemplate::new(
            vec!["a".into()],
            vec![None],
            vec![Vector3::zeros()],
            vec![Vector3::zeros()],
            vec![],
            vec![vec![1.0]],
            0.1,
        );
        assert!(matches!(r, Err(Error::EmptyTemplate)));
    }

    #[test]
    fn samples_lie_on_square() {
        let t = square();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = t.sample_surface(&mut rng);
            assert!((0.0..=1.0).contains(&s.point.x) && (0.0..=1.0).contains(&s.point.y));
            assert_eq!(s.point.z, 0.0);
        }
    }

    #[test]
    fn capsule_chain_is_valid_and_json_round_trips() {
        let chain = CapsuleChain::default();
        let t = chain.build().unwrap();
        assert_eq!(t.num_joints(), 2);
        let back = SkinnedTemplate::from_json_str(&t.to_json_string()).unwrap();
        assert_eq!(back.triangles, t.triangles);
        assert_eq!(back.weights, t.weights);
        // closed surface: area close to capsule area 2 pi r L + 4 pi r^2
        let want = std::f64::consts::TAU * 0.25 * 1.6 + 4.0 * std::f64::consts::PI * 0.0625;
        assert!((t.total_area() - want).abs() / want < 0.05);
    }

    #[test]
    fn point_triangle_distance_cases() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        assert!(
            (point_triangle_distance(&Vector3::new(0.2, 0.2, 2.0), &a, &b, &c) - 2.0).abs() < 1e-12
        );
        assert!(
            (point_triangle_distance(&Vector3::new(-1.0, 0.0, 0.0), &a, &b, &c) - 1.0).abs()
                < 1e-12
        );
        let d = point_triangle_distance(&Vector3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
