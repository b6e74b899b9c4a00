//! Image quality metrics.

use crate::error::Result;
use crate::render::Image;

/// Reported instead of infinity for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * m.log10()
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, evaluated at valid window positions.
/// Images smaller than the window fall back to a single global window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| a.data[i * c + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data[i * c + ch]).collect();
        if w < SSIM_WINDOW || h < SSIM_WINDOW {
            total += ssim_global(&x, &y);
            continue;
        }
        let k = gaussian_window();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, ow, oh) = filter(&x, w, h, &k);
        let (my, ..) = filter(&y, w, h, &k);
        let (sxx, ..) = filter(&prod(&x, &x), w, h, &k);
        let (syy, ..) = filter(&prod(&y, &y), w, h, &k);
        let (sxy, ..) = filter(&prod(&x, &y), w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            sum += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / c as f64)
}

fn ssim_global(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = x
        .iter()
        .zip(y)
        .map(|(u, v)| (u - mx) * (v - my))
        .sum::<f64>()
        / n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Intersection over union of two masks thresholded at 0.5.
pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let a = Image::new(4, 4, 3, vec![0.5; 48]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = Image::new(4, 4, 3, vec![0.6; 48]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    /// Literal per-window evaluation: weighted means, variances and covariance
    /// computed directly from the 2D Gaussian kernel at each window position.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let mut k2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let r2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                *v = (-r2 / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        for ch in 0..a.channels {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=a.height - 11 {
                for x0 in 0..=a.width - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            mx += k2[i][j] / s * a.get(x0 + j, y0 + i, ch);
                            my += k2[i][j] / s * b.get(x0 + j, y0 + i, ch);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = k2[i][j] / s;
                            let dx = a.get(x0 + j, y0 + i, ch) - mx;
                            let dy = b.get(x0 + j, y0 + i, ch) - my;
                            vx += w * dx * dx;
                            vy += w * dy * dy;
                            cxy += w * dx * dy;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn ssim_matches_literal_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let a =
                Image::new(20, 17, 3, (0..20 * 17 * 3).map(|_| rng.random()).collect()).unwrap();
            let b = Image::new(
                20,
                17,
                3,
                a.data
                    .iter()
                    .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(
            mask_iou(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]),
            1.0 / 3.0
        );
        assert_eq!(mask_iou(&[0.0; 4], &[0.0; 4]), 1.0);
    }
}
