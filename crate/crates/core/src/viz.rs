//! Feature-map visualization and segmentation.
//!
//! PCA maps N-dim features to RGB: mean and covariance come from every
//! third pixel, the top three eigenvectors from a deflated power method,
//! and each channel is stretched between the 2nd and 98th percentile of
//! the sampled projections. Segmentation labels pixels by cosine argmax
//! against a codebook.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::oracle::Codebook;
use crate::tensor::FeatureMap;

pub const PCA_STRIDE: usize = 3;
pub const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 20_000;
const PERCENTILES: (f64, f64) = (0.02, 0.98);
/// A pixel whose feature norm is below this fraction of the mean codebook
/// norm is background. Teacher features are convex combinations of unit
/// embeddings and zero, so their norm is the covered fraction of the
/// pixel.
pub const BACKGROUND_NORM_FRACTION: f64 = 0.5;
pub const OVERLAY_BLEND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub components: [Vec<f64>; 3],
    pub mean: Vec<f64>,
    /// Per-channel normalization range.
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, f: &[f64]) -> [f64; 3] {
        std::array::from_fn(|k| {
            self.components[k]
                .iter()
                .zip(f.iter().zip(&self.mean))
                .map(|(c, (v, m))| c * (v - m))
                .sum()
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top three principal directions of `map`, sampling every `stride`-th
/// pixel.
pub fn fit_pca(map: &FeatureMap, stride: usize) -> Result<PcaBasis> {
    let d = map.dim;
    let samples: Vec<&[f64]> = map.data.chunks_exact(d.max(1)).step_by(stride.max(1)).collect();
    if d < 3 || samples.len() < 3 {
        return Err(Error::DegenerateFeatureMap(format!(
            "{} samples of dimension {d}; need at least 3 of each",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(*s) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for s in &samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for r in 0..d {
            for k in r..d {
                cov[r * d + k] += c[r] * c[k] / n;
            }
        }
    }
    for r in 0..d {
        for k in 0..r {
            cov[r * d + k] = cov[k * d + r];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(3);
    for k in 0..3 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w: Vec<f64> = (0..d).map(|r| dot(&cov[r * d..(r + 1) * d], &v)).collect();
            // deflate: remove the components already found
            for c in &comps {
                let p = dot(&w, c);
                w.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            lambda = dot(&w, &w).sqrt();
            if !(lambda > 1e-12 * trace.max(f64::MIN_POSITIVE)) || lambda < 1e-300 {
                return Err(Error::DegenerateFeatureMap(format!(
                    "feature samples have rank {k}, need 3"
                )));
            }
            w.iter_mut().for_each(|x| *x /= lambda);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        log::trace!("principal component {k}: eigenvalue {lambda}");
        // re-orthonormalize against earlier components
        for c in &comps {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        let nv = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        comps.push(v);
    }
    let components: [Vec<f64>; 3] = comps.try_into().expect("three components");
    let mut basis = PcaBasis {
        components,
        mean,
        min: [0.0; 3],
        max: [0.0; 3],
    };
    let projected: Vec<[f64; 3]> = samples.iter().map(|s| basis.project(s)).collect();
    for k in 0..3 {
        let mut vals: Vec<f64> = projected.iter().map(|p| p[k]).collect();
        vals.sort_by(f64::total_cmp);
        let at = |q: f64| vals[((vals.len() - 1) as f64 * q).round() as usize];
        let (lo, hi) = (at(PERCENTILES.0), at(PERCENTILES.1));
        basis.min[k] = lo;
        basis.max[k] = if hi > lo { hi } else { lo + 1e-12 };
    }
    Ok(basis)
}

/// RGB image of the projection on the three components, each channel
/// stretched to the basis range and clamped to `[0, 1]`.
pub fn visualize_features(map: &FeatureMap, basis: &PcaBasis) -> Result<FeatureMap> {
    if map.dim != basis.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature map vs PCA basis",
            expected: basis.dim(),
            got: map.dim,
        });
    }
    let mut out = FeatureMap::zeros(map.height, map.width, 3);
    for (px, f) in out.data.chunks_exact_mut(3).zip(map.data.chunks_exact(map.dim)) {
        let p = basis.project(f);
        for k in 0..3 {
            px[k] = ((p[k] - basis.min[k]) / (basis.max[k] - basis.min[k])).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Codebook index per pixel: background when the feature is too short to
/// be a covered pixel, otherwise the cosine argmax (lowest index on ties).
pub fn segment_features(map: &FeatureMap, codebook: &Codebook) -> Result<Vec<u8>> {
    if map.dim != codebook.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature map vs codebook",
            expected: codebook.dim(),
            got: map.dim,
        });
    }
    if codebook.len() < 2 {
        return Err(Error::LabelSetTooSmall(codebook.len()));
    }
    let mean_norm = (0..codebook.len()).map(|i| dot(&codebook.embedding(i), &codebook.embedding(i)).sqrt()).sum::<f64>()
        / codebook.len() as f64;
    let cutoff = BACKGROUND_NORM_FRACTION * mean_norm;
    Ok(map
        .data
        .chunks_exact(map.dim)
        .map(|f| {
            if dot(f, f).sqrt() < cutoff {
                codebook.background as u8
            } else {
                codebook.classify(f) as u8
            }
        })
        .collect())
}

/// Deterministic color per label: FNV-1a hash of the name picks the hue.
pub fn label_color(label: &str) -> [f64; 3] {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let hue = (h % 3600) as f64 / 3600.0;
    hsv(hue, 0.65, 0.95)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Palette image of a class map.
pub fn colorize(class_map: &[u8], codebook: &Codebook, width: usize, height: usize) -> Result<FeatureMap> {
    if class_map.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "class map of {} pixels for {width}x{height}",
            class_map.len()
        )));
    }
    let palette: Vec<[f64; 3]> = codebook.labels.iter().map(|l| label_color(l)).collect();
    let mut out = FeatureMap::zeros(height, width, 3);
    for (px, &c) in out.data.chunks_exact_mut(3).zip(class_map) {
        px.copy_from_slice(palette.get(c as usize).unwrap_or(&[0.0; 3]));
    }
    Ok(out)
}

/// `0.5·rgb + 0.5·colors`.
pub fn overlay(rgb: &FeatureMap, colors: &FeatureMap) -> Result<FeatureMap> {
    rgb.check_same_shape(colors, "overlay")?;
    let data = rgb
        .data
        .iter()
        .zip(&colors.data)
        .map(|(a, b)| (1.0 - OVERLAY_BLEND) * a + OVERLAY_BLEND * b)
        .collect();
    FeatureMap::from_data(rgb.height, rgb.width, 3, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class intersection over union and their mean over classes present
/// in either map.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("class maps of {} and {} pixels", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::InvalidConfig(format!("class id {} out of range {num_classes}", p.max(g))));
        }
        union[g] += 1;
        if p == g {
            inter[g] += 1;
        } else {
            union[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}
