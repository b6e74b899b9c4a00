//! Photometric, mask, perceptual-proxy and as-isometric-as-possible losses.
//! Every function returns the value together with its gradient.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::knn::KnnGraph;
use crate::render::Image;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {a} vs {b} values"
        )));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over every channel of every pixel.
pub fn loss_l1(render: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(render.len(), gt.len(), "l1")?;
    let n = render.len().max(1) as f64;
    let value = render
        .iter()
        .zip(gt)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let grad = render
        .iter()
        .zip(gt)
        .map(|(a, b)| sign(a - b) / n)
        .collect();
    Ok((value, grad))
}

/// Mean `|O - mask|` over pixels.
pub fn loss_mask(opacity: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(opacity.len(), mask.len(), "mask")?;
    loss_l1(opacity, mask)
}

/// Differentiable image-similarity term standing in for a learned perceptual metric.
pub trait PerceptualLoss: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Value and `dL/d render` for same-shaped images.
    fn evaluate(&self, render: &Image, gt: &Image) -> Result<(f64, Vec<f64>)>;
}

/// Average of l1 errors over an image pyramid built by 2x2 box downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidL1 {
    pub levels: usize,
}

impl Default for PyramidL1 {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

fn downsample(img: &Image) -> Image {
    let (w, h, c) = (img.width / 2, img.height / 2, img.channels);
    let mut out = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                out.data[(y * w + x) * c + k] = 0.25
                    * (img.get(2 * x, 2 * y, k)
                        + img.get(2 * x + 1, 2 * y, k)
                        + img.get(2 * x, 2 * y + 1, k)
                        + img.get(2 * x + 1, 2 * y + 1, k));
            }
        }
    }
    out
}

fn upsample_grad(grad: &[f64], coarse_w: usize, coarse_h: usize, fine: &Image) -> Vec<f64> {
    let c = fine.channels;
    let mut out = vec![0.0; fine.data.len()];
    for y in 0..coarse_h {
        for x in 0..coarse_w {
            for k in 0..c {
                let g = 0.25 * grad[(y * coarse_w + x) * c + k];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out[((2 * y + dy) * fine.width + 2 * x + dx) * c + k] += g;
                }
            }
        }
    }
    out
}

impl PerceptualLoss for PyramidL1 {
    fn name(&self) -> &'static str {
        "pyramid_l1"
    }

    fn evaluate(&self, render: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
        render.same_shape(gt)?;
        let mut r_levels = vec![render.clone()];
        let mut g_levels = vec![gt.clone()];
        while r_levels.len() < self.levels {
            let last = r_levels.last().expect("non-empty");
            if last.width < 2 || last.height < 2 {
                break;
            }
            let r = downsample(last);
            let g = downsample(g_levels.last().expect("non-empty"));
            r_levels.push(r);
            g_levels.push(g);
        }
        let used = r_levels.len() as f64;
        let mut value = 0.0;
        let mut grad: Option<Vec<f64>> = None;
        for l in (0..r_levels.len()).rev() {
            let (v, mut g) = loss_l1(&r_levels[l].data, &g_levels[l].data)?;
            value += v / used;
            g.iter_mut().for_each(|x| *x /= used);
            if let Some(coarser) = grad.take() {
                let up = upsample_grad(
                    &coarser,
                    r_levels[l + 1].width,
                    r_levels[l + 1].height,
                    &r_levels[l],
                );
                for (a, b) in g.iter_mut().zip(up) {
                    *a += b;
                }
            }
            grad = Some(g);
        }
        Ok((value, grad.unwrap_or_default()))
    }
}

pub const DEFAULT_PERCEPTUAL: &str = "pyramid_l1";

pub fn perceptual_plugin(name: &str) -> Result<Box<dyn PerceptualLoss>> {
    match name {
        "pyramid_l1" => Ok(Box::new(PyramidL1::default())),
        other => Err(Error::UnknownPlugin(other.to_string())),
    }
}

/// Inclusive `(x0, y0, x1, y1)` bounds of mask pixels above 0.5.
pub fn mask_bbox(mask: &Image) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0.5 {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b
}

pub fn crop(img: &Image, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> Image {
    let (w, h, c) = (x1 - x0 + 1, y1 - y0 + 1, img.channels);
    let mut out = Image::zeros(w, h, c);
    for y in 0..h {
        let src = ((y0 + y) * img.width + x0) * c;
        out.data[y * w * c..(y + 1) * w * c].copy_from_slice(&img.data[src..src + w * c]);
    }
    out
}

/// Perceptual term on the tight crop around the ground-truth mask; the
/// gradient is returned at full resolution.
pub fn loss_perceptual(
    plugin: &dyn PerceptualLoss,
    render: &Image,
    gt: &Image,
    mask: &Image,
) -> Result<(f64, Vec<f64>)> {
    render.same_shape(gt)?;
    let bbox = mask_bbox(mask).unwrap_or((0, 0, render.width - 1, render.height - 1));
    let (v, g) = plugin.evaluate(&crop(render, bbox), &crop(gt, bbox))?;
    let (x0, y0, x1, _) = bbox;
    let (w, c) = (x1 - x0 + 1, render.channels);
    let mut full = vec![0.0; render.data.len()];
    for (row, chunk) in g.chunks_exact(w * c).enumerate() {
        let dst = ((y0 + row) * render.width + x0) * c;
        full[dst..dst + w * c].copy_from_slice(chunk);
    }
    Ok((v, full))
}

/// Value and gradients on both sides of an AIAP term.
#[derive(Debug, Clone, PartialEq)]
pub struct AiapTerm<T> {
    pub value: f64,
    pub grad_canonical: Vec<T>,
    pub grad_observed: Vec<T>,
}

/// `1/E * sum_i sum_{j in N(i)} | |x_c^i - x_c^j| - |x_o^i - x_o^j| |`, `E` the edge count.
pub fn loss_aiap_pos(
    canonical: &[Vector3<f64>],
    observed: &[Vector3<f64>],
    knn: &KnnGraph,
) -> AiapTerm<Vector3<f64>> {
    aiap(
        canonical,
        observed,
        knn,
        |a, b| a - b,
        |d: &Vector3<f64>| d.norm(),
        Vector3::zeros(),
    )
}

/// Same form with Frobenius distances between covariance matrices.
pub fn loss_aiap_cov(
    canonical: &[Matrix3<f64>],
    observed: &[Matrix3<f64>],
    knn: &KnnGraph,
) -> AiapTerm<Matrix3<f64>> {
    aiap(
        canonical,
        observed,
        knn,
        |a, b| a - b,
        |d: &Matrix3<f64>| d.norm(),
        Matrix3::zeros(),
    )
}

fn aiap<T>(
    canonical: &[T],
    observed: &[T],
    knn: &KnnGraph,
    sub: impl Fn(&T, &T) -> T,
    norm: impl Fn(&T) -> f64,
    zero: T,
) -> AiapTerm<T>
where
    T: Copy + std::ops::AddAssign + std::ops::SubAssign + std::ops::Mul<f64, Output = T>,
{
    let n = canonical.len();
    let edges = knn.edge_count().max(1) as f64;
    let mut out = AiapTerm {
        value: 0.0,
        grad_canonical: vec![zero; n],
        grad_observed: vec![zero; n],
    };
    for (i, list) in knn.iter() {
        for &j in list {
            let dc = sub(&canonical[i], &canonical[j]);
            let d_o = sub(&observed[i], &observed[j]);
            let (a, b) = (norm(&dc), norm(&d_o));
            out.value += (a - b).abs();
            let s = sign(a - b) / edges;
            if s == 0.0 {
                continue;
            }
            if a > 0.0 {
                let g = dc * (s / a);
                out.grad_canonical[i] += g;
                out.grad_canonical[j] -= g;
            }
            if b > 0.0 {
                let g = d_o * (s / b);
                out.grad_observed[i] -= g;
                out.grad_observed[j] += g;
            }
        }
    }
    out.value /= edges;
    out
}
