//! Photometric and feature losses with their gradients.
//!
//! The photometric loss is `(1 - λ)·L1 + λ·(1 - SSIM)/2`. SSIM uses an
//! 11×11 Gaussian window (σ = 1.5), zero padding, and the standard
//! constants for a `[0, 1]` range, averaged over every pixel and channel.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    /// `dL/d rendered`.
    pub grad: FeatureMap,
}

fn check_pair(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    a.check_same_shape(b, what)?;
    if a.data.is_empty() {
        return Err(Error::ShapeMismatch(format!("{what}: empty maps")));
    }
    Ok(())
}

/// Mean absolute error and its subgradient (0 at ties).
pub fn l1_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    check_pair(pred, target, "L1 loss")?;
    let count = pred.data.len() as f64;
    let mut grad = FeatureMap::zeros(pred.height, pred.width, pred.dim);
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        };
    }
    Ok((sum / count, grad))
}

/// Feature distillation loss: L1 between the (decoded, resized) rendered
/// feature map and the teacher map.
pub fn feature_loss(rendered: &FeatureMap, teacher: &FeatureMap) -> Result<(f64, FeatureMap)> {
    l1_loss(rendered, teacher)
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian blur of one `h × w` plane with zero padding. The
/// kernel is symmetric, so this operator is its own transpose.
fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM of `x` against `y` and `d SSIM / d x`.
pub fn ssim(x: &FeatureMap, y: &FeatureMap) -> Result<(f64, FeatureMap)> {
    check_pair(x, y, "SSIM")?;
    let (h, w, c) = (x.height, x.width, x.dim);
    let kernel = gaussian_window();
    let count = (h * w * c) as f64;
    let mut total = 0.0;
    let mut grad = FeatureMap::zeros(h, w, c);
    let plane = |m: &FeatureMap, ch: usize| -> Vec<f64> { (0..h * w).map(|p| m.data[p * c + ch]).collect() };
    for ch in 0..c {
        let xs = plane(x, ch);
        let ys = plane(y, ch);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mu_x = blur(&xs, h, w, &kernel);
        let mu_y = blur(&ys, h, w, &kernel);
        let e_xx = blur(&xx, h, w, &kernel);
        let e_yy = blur(&yy, h, w, &kernel);
        let e_xy = blur(&xy, h, w, &kernel);

        // Per-pixel partials of S w.r.t. the local statistics.
        let mut d_mu = vec![0.0; h * w];
        let mut d_sxx = vec![0.0; h * w];
        let mut d_sxy = vec![0.0; h * w];
        for p in 0..h * w {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let ds_dmx = 2.0 * my * a2 / (b1 * b2) - 2.0 * mx * a1 * a2 / (b1 * b1 * b2);
            let ds_dsxx = -a1 * a2 / (b1 * b2 * b2);
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            // σxx = E[x²] - μx², σxy = E[xy] - μx μy
            d_mu[p] = (ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy) / count;
            d_sxx[p] = ds_dsxx / count;
            d_sxy[p] = ds_dsxy / count;
        }
        let g_mu = blur(&d_mu, h, w, &kernel);
        let g_xx = blur(&d_sxx, h, w, &kernel);
        let g_xy = blur(&d_sxy, h, w, &kernel);
        for p in 0..h * w {
            grad.data[p * c + ch] = g_mu[p] + 2.0 * xs[p] * g_xx[p] + ys[p] * g_xy[p];
        }
    }
    Ok((total / count, grad))
}

/// `(1 - λ)·L1 + λ·(1 - SSIM)/2` and its gradient w.r.t. `rendered`.
pub fn photometric_loss(rendered: &FeatureMap, target: &FeatureMap, lambda: f64) -> Result<PhotometricLoss> {
    if rendered.height != target.height || rendered.width != target.width {
        return Err(Error::ShapeMismatch(format!(
            "photometric loss: rendered {}x{} vs target {}x{}",
            rendered.height, rendered.width, target.height, target.width
        )));
    }
    let (l1, g_l1) = l1_loss(rendered, target)?;
    let (s, g_s) = if lambda > 0.0 {
        ssim(rendered, target)?
    } else {
        (1.0, FeatureMap::zeros(rendered.height, rendered.width, rendered.dim))
    };
    let total = (1.0 - lambda) * l1 + lambda * 0.5 * (1.0 - s);
    let mut grad = g_l1;
    for (g, gs) in grad.data.iter_mut().zip(&g_s.data) {
        *g = (1.0 - lambda) * *g - 0.5 * lambda * gs;
    }
    Ok(PhotometricLoss {
        total,
        l1,
        ssim: s,
        grad,
    })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_pair(a, b, "PSNR")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
