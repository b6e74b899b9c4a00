//! Projection of observation-space gaussians, tile-based front-to-back
//! alpha blending, a naive reference renderer and the analytic backward pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::camera::Camera;
use crate::error::{Error, Result};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once the transmittance drops below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Added to the diagonal of every projected covariance (px^2).
pub const LOWPASS: f64 = 0.3;
/// Half squared Mahalanobis distance at 3 sigma; fragments are zero beyond it.
pub const MAX_POWER: f64 = 4.5;
pub const MIN_DET: f64 = 1e-12;

/// Observation-space gaussians ready for rasterization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatScene {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    /// Opacity in `(0, 1)`.
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl SplatScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        covariance: Matrix3<f64>,
        opacity: f64,
        color: [f64; 3],
    ) {
        self.positions.push(position);
        self.covariances.push(covariance);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    /// Same scene with the gaussians reordered by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            covariances: perm.iter().map(|&i| self.covariances[i]).collect(),
            opacities: perm.iter().map(|&i| self.opacities[i]).collect(),
            colors: perm.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

/// A gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFragment {
    pub source: usize,
    pub mean: Vector2<f64>,
    /// Screen-space covariance including the low-pass floor.
    pub cov2: Matrix2<f64>,
    /// Inverse of `cov2` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds of the 3 sigma box: `(x0, y0, x1, y1)`.
    pub pixel_rect: (usize, usize, usize, usize),
    cam: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
}

fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz2,
    )
}

/// Pinhole mean and EWA covariance; `None` if culled.
pub fn project(
    source: usize,
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    opacity: f64,
    color: [f64; 3],
    camera: &Camera,
) -> Option<SplatFragment> {
    let w = &camera.world_to_cam;
    let t = w.apply_point(position);
    if !(t.z > camera.near && t.z < camera.far) {
        return None;
    }
    let mean = Vector2::new(
        camera.fx * t.x / t.z + camera.cx,
        camera.fy * t.y / t.z + camera.cy,
    );
    let jacobian = projection_jacobian(camera, &t);
    let cov_cam = w.linear * covariance * w.linear.transpose();
    let cov2 = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * LOWPASS;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > MIN_DET) {
        return None;
    }
    let conic = [cov2[(1, 1)] / det, -cov2[(0, 1)] / det, cov2[(0, 0)] / det];
    // Exact bounding box of the 3 sigma ellipse, padded against round-off.
    let rx = 3.0 * cov2[(0, 0)].sqrt() * (1.0 + 1e-9) + 1e-9;
    let ry = 3.0 * cov2[(1, 1)].sqrt() * (1.0 + 1e-9) + 1e-9;
    let x0 = (mean.x - rx - 0.5).ceil().max(0.0);
    let y0 = (mean.y - ry - 0.5).ceil().max(0.0);
    let x1 = (mean.x + rx - 0.5).floor().min(camera.width as f64 - 1.0);
    let y1 = (mean.y + ry - 0.5).floor().min(camera.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(SplatFragment {
        source,
        mean,
        cov2,
        conic,
        depth: t.z,
        opacity,
        color,
        pixel_rect: (x0 as usize, y0 as usize, x1 as usize, y1 as usize),
        cam: t,
        jacobian,
        cov_cam,
    })
}

/// Gradients on the outputs of [`project`] that are used by blending.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FragmentGrad {
    pub mean: Vector2<f64>,
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl FragmentGrad {
    fn add(&mut self, o: &FragmentGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Backward of [`project`]: returns `(dL/dposition, dL/dcovariance)`.
pub fn project_backward(
    frag: &SplatFragment,
    camera: &Camera,
    grad_mean: &Vector2<f64>,
    grad_conic: &[f64; 3],
) -> (Vector3<f64>, Matrix3<f64>) {
    let t = frag.cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dt = Vector3::new(
        grad_mean.x * fx * iz,
        grad_mean.y * fy * iz,
        -grad_mean.x * fx * t.x * iz2 - grad_mean.y * fy * t.y * iz2,
    );
    let k = Matrix2::new(frag.conic[0], frag.conic[1], frag.conic[1], frag.conic[2]);
    let g = Matrix2::new(
        grad_conic[0],
        0.5 * grad_conic[1],
        0.5 * grad_conic[1],
        grad_conic[2],
    );
    let d_cov2 = -(k * g * k);
    let j = frag.jacobian;
    let d_cov_cam = j.transpose() * d_cov2 * j;
    let d_j = (d_cov2 + d_cov2.transpose()) * j * frag.cov_cam;
    dt.x += d_j[(0, 2)] * (-fx * iz2);
    dt.y += d_j[(1, 2)] * (-fy * iz2);
    dt.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let r = camera.world_to_cam.linear;
    (r.transpose() * dt, r.transpose() * d_cov_cam * r)
}

/// `(alpha', exp(-power), dx, dy, clamped)` of a fragment at a pixel center,
/// or `None` outside the 3 sigma ellipse.
#[inline]
fn fragment_alpha(f: &SplatFragment, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - f.mean.x;
    let dy = py - f.mean.y;
    let power = 0.5 * (f.conic[0] * dx * dx + f.conic[2] * dy * dy) + f.conic[1] * dx * dy;
    if power > MAX_POWER {
        return None;
    }
    let g = (-power).exp();
    let a = f.opacity * g;
    if a > ALPHA_MAX {
        Some((ALPHA_MAX, g, dx, dy, true))
    } else {
        Some((a, g, dx, dy, false))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PixelOut {
    rgb: [f64; 3],
    alpha: f64,
    transmittance: f64,
    /// Number of list entries visited, including the terminating one.
    visited: u32,
}

/// Front-to-back compositing of depth-ordered fragments at one pixel.
/// With `terminate`, a fragment is blended and then blending stops if the
/// transmittance fell below [`TRANSMITTANCE_MIN`].
fn blend_pixel<'a>(
    frags: impl Iterator<Item = &'a SplatFragment>,
    px: f64,
    py: f64,
    terminate: bool,
) -> PixelOut {
    let mut out = PixelOut {
        transmittance: 1.0,
        ..Default::default()
    };
    for (i, f) in frags.enumerate() {
        let Some((a, ..)) = fragment_alpha(f, px, py) else {
            continue;
        };
        let w = a * out.transmittance;
        for k in 0..3 {
            out.rgb[k] += w * f.color[k];
        }
        out.alpha += w;
        out.transmittance *= 1.0 - a;
        out.visited = i as u32 + 1;
        if terminate && out.transmittance < TRANSMITTANCE_MIN {
            break;
        }
    }
    out
}

/// Data retained from the forward pass for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderCache {
    fragments: Vec<SplatFragment>,
    tile_lists: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// Rendered RGB, opacity map and per-pixel diagnostics.
#[derive(Debug, Clone)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<f64>,
    /// Accumulated opacity `O_p`.
    pub alpha: Vec<f64>,
    /// Number of depth-list entries visited per pixel.
    pub contributors: Vec<u32>,
    pub final_transmittance: Vec<f64>,
    cache: Option<RenderCache>,
}

impl Framebuffer {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            contributors: vec![0; n],
            final_transmittance: vec![1.0; n],
            cache: None,
        }
    }

    fn write(&mut self, idx: usize, p: &PixelOut) {
        self.rgb[3 * idx..3 * idx + 3].copy_from_slice(&p.rgb);
        self.alpha[idx] = p.alpha;
        self.contributors[idx] = p.visited;
        self.final_transmittance[idx] = p.transmittance;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Number of gaussians that survived culling.
    pub fn visible_count(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.fragments.len())
    }

    pub fn fragments(&self) -> &[SplatFragment] {
        self.cache.as_ref().map_or(&[], |c| &c.fragments)
    }
}

fn project_all(scene: &SplatScene, camera: &Camera) -> Vec<SplatFragment> {
    let mut frags: Vec<SplatFragment> = (0..scene.len())
        .into_par_iter()
        .filter_map(|i| {
            project(
                i,
                &scene.positions[i],
                &scene.covariances[i],
                scene.opacities[i],
                scene.colors[i],
                camera,
            )
        })
        .collect();
    frags.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    frags
}

/// Tiled renderer used for training and inference.
pub fn render(scene: &SplatScene, camera: &Camera) -> Framebuffer {
    let (w, h) = (camera.width, camera.height);
    let fragments = project_all(scene, camera);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (fi, f) in fragments.iter().enumerate() {
        let (x0, y0, x1, y1) = f.pixel_rect;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tile_lists[ty * tiles_x + tx].push(fi as u32);
            }
        }
    }
    let blocks: Vec<Vec<(usize, PixelOut)>> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut out = Vec::with_capacity(TILE * TILE);
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let p = blend_pixel(
                        list.iter().map(|&i| &fragments[i as usize]),
                        px as f64 + 0.5,
                        py as f64 + 0.5,
                        true,
                    );
                    out.push((py * w + px, p));
                }
            }
            out
        })
        .collect();
    let mut fb = Framebuffer::empty(w, h);
    for block in &blocks {
        for (idx, p) in block {
            fb.write(*idx, p);
        }
    }
    fb.cache = Some(RenderCache {
        fragments,
        tile_lists,
        tiles_x,
    });
    fb
}

/// Reference renderer: one global depth sort, every fragment evaluated at
/// every pixel, no tiles. `terminate` enables the same early stop as [`render`].
pub fn render_oracle(scene: &SplatScene, camera: &Camera, terminate: bool) -> Framebuffer {
    let fragments = project_all(scene, camera);
    let mut fb = Framebuffer::empty(camera.width, camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let p = blend_pixel(
                fragments.iter(),
                px as f64 + 0.5,
                py as f64 + 0.5,
                terminate,
            );
            fb.write(py * camera.width + px, &p);
        }
    }
    fb
}

/// Per-gaussian gradients produced by [`render_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Norm of the screen-space mean gradient in NDC units.
    pub view_grad_norm: Vec<f64>,
    /// Whether the gaussian survived culling.
    pub visible: Vec<bool>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            view_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Backpropagates `dL/d rgb` (interleaved) and `dL/d O` through blending and
/// projection. Requires a framebuffer produced by [`render`].
pub fn render_backward(
    fb: &Framebuffer,
    scene: &SplatScene,
    camera: &Camera,
    grad_rgb: &[f64],
    grad_alpha: &[f64],
) -> Result<SplatGrads> {
    let cache = fb.cache.as_ref().ok_or(Error::MissingForwardCache)?;
    let (w, h) = (fb.width, fb.height);
    if grad_rgb.len() != 3 * w * h || grad_alpha.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "render gradient buffers for {w}x{h}: got {} rgb, {} alpha",
            grad_rgb.len(),
            grad_alpha.len()
        )));
    }
    let frags = &cache.fragments;
    let partials: Vec<Vec<(u32, FragmentGrad)>> = cache
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % cache.tiles_x, tile / cache.tiles_x);
            let mut acc = vec![FragmentGrad::default(); list.len()];
            let mut touched = vec![false; list.len()];
            let mut entries: Vec<(usize, f64, f64, f64, f64, bool, f64)> = Vec::new();
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let idx = py * w + px;
                    let n = fb.contributors[idx] as usize;
                    let dc = [
                        grad_rgb[3 * idx],
                        grad_rgb[3 * idx + 1],
                        grad_rgb[3 * idx + 2],
                    ];
                    let d_o = grad_alpha[idx];
                    if n == 0 || (dc == [0.0; 3] && d_o == 0.0) {
                        continue;
                    }
                    let (pxf, pyf) = (px as f64 + 0.5, py as f64 + 0.5);
                    entries.clear();
                    let mut t = 1.0;
                    for (slot, &fi) in list[..n].iter().enumerate() {
                        if let Some((a, g, dx, dy, clamped)) =
                            fragment_alpha(&frags[fi as usize], pxf, pyf)
                        {
                            entries.push((slot, a, t, g, dx, clamped, dy));
                            t *= 1.0 - a;
                        }
                    }
                    let mut suffix_rgb = [0.0; 3];
                    let mut suffix_o = 0.0;
                    for &(slot, a, t, g, dx, clamped, dy) in entries.iter().rev() {
                        let f = &frags[list[slot] as usize];
                        let wgt = a * t;
                        let gr = &mut acc[slot];
                        touched[slot] = true;
                        let mut d_a = 0.0;
                        for k in 0..3 {
                            gr.color[k] += dc[k] * wgt;
                            d_a += dc[k] * (t * f.color[k] - suffix_rgb[k] / (1.0 - a));
                            suffix_rgb[k] += wgt * f.color[k];
                        }
                        d_a += d_o * (t - suffix_o / (1.0 - a));
                        suffix_o += wgt;
                        if clamped {
                            continue;
                        }
                        gr.opacity += d_a * g;
                        let d_power = -d_a * a;
                        let (ca, cb, cc) = (f.conic[0], f.conic[1], f.conic[2]);
                        gr.mean.x += d_power * -(ca * dx + cb * dy);
                        gr.mean.y += d_power * -(cb * dx + cc * dy);
                        gr.conic[0] += d_power * 0.5 * dx * dx;
                        gr.conic[1] += d_power * dx * dy;
                        gr.conic[2] += d_power * 0.5 * dy * dy;
                    }
                }
            }
            list.iter()
                .zip(acc)
                .zip(touched)
                .filter(|(_, t)| *t)
                .map(|((&fi, g), _)| (fi, g))
                .collect()
        })
        .collect();
    let mut frag_grads = vec![FragmentGrad::default(); frags.len()];
    for part in &partials {
        for (fi, g) in part {
            frag_grads[*fi as usize].add(g);
        }
    }
    let projected: Vec<(Vector3<f64>, Matrix3<f64>)> = frags
        .par_iter()
        .zip(&frag_grads)
        .map(|(f, g)| project_backward(f, camera, &g.mean, &g.conic))
        .collect();
    let mut out = SplatGrads::zeros(scene.len());
    let (half_w, half_h) = (0.5 * w as f64, 0.5 * h as f64);
    for ((f, g), (dp, dcov)) in frags.iter().zip(&frag_grads).zip(projected) {
        let s = f.source;
        out.positions[s] = dp;
        out.covariances[s] = dcov;
        out.opacities[s] = g.opacity;
        out.colors[s] = g.color;
        out.view_grad_norm[s] = (g.mean.x * half_w).hypot(g.mean.y * half_h);
        out.visible[s] = true;
    }
    Ok(out)
}
