//! The explicit scene: a cloud of anisotropic 3D Gaussians carrying color
//! and an N-dimensional semantic feature.
//!
//! Storage is struct-of-arrays in 32-bit floats, which is also the on-disk
//! precision. Opacity is kept as a logit and scale as a log so optimizer
//! steps stay unconstrained; everything downstream reads them through
//! [`sigmoid`] and `exp`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One Gaussian, gathered out of a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// Quaternion `(w, x, y, z)`, unit norm.
    pub rotation: [f32; 4],
    pub log_scale: [f32; 3],
    pub opacity_logit: f32,
    pub color: [f32; 3],
    pub feature: Vec<f32>,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|s| (s as f64).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    feature_dim: usize,
    /// Radius of the bounding sphere of the initial positions. Fixed after
    /// construction; densification thresholds are relative to it.
    pub scene_extent: f32,
    pub positions: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub log_scales: Vec<[f32; 3]>,
    pub opacity_logits: Vec<f32>,
    pub colors: Vec<[f32; 3]>,
    /// Row-major `len × feature_dim`.
    pub features: Vec<f32>,
}

impl GaussianCloud {
    pub fn new(feature_dim: usize, scene_extent: f32) -> Self {
        Self {
            feature_dim,
            scene_extent,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            colors: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn with_capacity(feature_dim: usize, scene_extent: f32, capacity: usize) -> Self {
        Self {
            feature_dim,
            scene_extent,
            positions: Vec::with_capacity(capacity),
            rotations: Vec::with_capacity(capacity),
            log_scales: Vec::with_capacity(capacity),
            opacity_logits: Vec::with_capacity(capacity),
            colors: Vec::with_capacity(capacity),
            features: Vec::with_capacity(capacity * feature_dim),
        }
    }

    /// Builds a cloud from gathered Gaussians, with `scene_extent` taken
    /// from the bounding sphere of their positions.
    pub fn from_gaussians(feature_dim: usize, gaussians: Vec<Gaussian>) -> Result<Self> {
        let mut cloud = Self::with_capacity(feature_dim, 1.0, gaussians.len());
        for g in gaussians {
            cloud.push(g)?;
        }
        cloud.scene_extent = bounding_radius(&cloud.positions).max(1e-6);
        Ok(cloud)
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.feature.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "Gaussian feature",
                expected: self.feature_dim,
                got: g.feature.len(),
            });
        }
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.colors.push(g.color);
        self.features.extend_from_slice(&g.feature);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            color: self.colors[i],
            feature: self.feature(i).to_vec(),
        }
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    #[inline]
    pub fn feature_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i] as f64)
    }

    #[inline]
    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(|s| (s as f64).exp())
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        let s = self.scale(i);
        s[0].max(s[1]).max(s[2])
    }

    /// Keeps Gaussian `i` iff `keep[i]`, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let n = self.feature_dim;
        let mut dst = 0;
        for src in 0..keep.len() {
            if !keep[src] {
                continue;
            }
            if dst != src {
                self.positions[dst] = self.positions[src];
                self.rotations[dst] = self.rotations[src];
                self.log_scales[dst] = self.log_scales[src];
                self.opacity_logits[dst] = self.opacity_logits[src];
                self.colors[dst] = self.colors[src];
                self.features.copy_within(src * n..(src + 1) * n, dst * n);
            }
            dst += 1;
        }
        self.positions.truncate(dst);
        self.rotations.truncate(dst);
        self.log_scales.truncate(dst);
        self.opacity_logits.truncate(dst);
        self.colors.truncate(dst);
        self.features.truncate(dst * n);
    }

    /// Drops every Gaussian whose opacity is exactly zero (the edit
    /// sentinel). Returns how many were removed.
    pub fn compact_transparent(&mut self) -> usize {
        let keep: Vec<bool> = self
            .opacity_logits
            .iter()
            .map(|&l| l != f32::NEG_INFINITY)
            .collect();
        let before = self.len();
        self.retain_mask(&keep);
        before - self.len()
    }

    /// Renormalizes every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = normalize_quat(*q);
        }
    }

    /// Checks the per-Gaussian invariants, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !(self.scene_extent.is_finite() && self.scene_extent > 0.0) {
            return Err(Error::InvalidRecord {
                record: 0,
                offset: 0,
                reason: format!("scene_extent must be positive, got {}", self.scene_extent),
            });
        }
        for i in 0..self.len() {
            let bad = |reason: String| Error::InvalidRecord {
                record: i,
                offset: 0,
                reason,
            };
            let g = self.get(i);
            let finite = g.position.iter().all(|v| v.is_finite())
                && g.rotation.iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite())
                && !g.opacity_logit.is_nan()
                && g.color.iter().all(|v| v.is_finite())
                && g.feature.iter().all(|v| v.is_finite());
            if !finite {
                return Err(bad("non-finite attribute".into()));
            }
            let norm = quat_norm(g.rotation);
            if (norm - 1.0).abs() > 1e-3 {
                return Err(bad(format!("rotation norm {norm} is not 1")));
            }
            if g.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(bad(format!("color {:?} outside [0,1]", g.color)));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: [f32; 4]) -> f64 {
    q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

pub fn normalize_quat(q: [f32; 4]) -> [f32; 4] {
    let n = quat_norm(q);
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| (v as f64 / n) as f32)
}

/// Maximum distance of any position from the centroid.
pub fn bounding_radius(positions: &[[f32; 3]]) -> f32 {
    if positions.is_empty() {
        return 0.0;
    }
    let n = positions.len() as f64;
    let mut c = [0.0f64; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k] as f64 / n;
        }
    }
    positions
        .iter()
        .map(|p| {
            (0..3)
                .map(|k| (p[k] as f64 - c[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max) as f32
}

const FEATURE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Random initialization standing in for a structure-from-motion point
/// cloud: positions uniform in `[-extent, extent]^3`, identity rotations,
/// isotropic scale `extent / cbrt(count)`, opacity 0.1, uniform colors and
/// small normal features.
pub fn random_init(count: usize, feature_dim: usize, extent: f32, seed: u64) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Features come from their own stream so that geometry and colors do
    // not depend on the feature dimension.
    let mut feature_rng = ChaCha8Rng::seed_from_u64(seed ^ FEATURE_STREAM);
    let log_scale = (extent as f64 / (count as f64).cbrt()).ln() as f32;
    let opacity_logit = logit(0.1) as f32;
    let mut cloud = GaussianCloud::with_capacity(feature_dim, extent, count);
    for _ in 0..count {
        let position = [0; 3].map(|_| rng.random_range(-extent..=extent));
        let color = [0; 3].map(|_| rng.random_range(0.0f32..=1.0));
        let feature = (0..feature_dim)
            .map(|_| 0.01 * feature_rng.sample::<f32, _>(StandardNormal))
            .collect();
        cloud.push(Gaussian {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale; 3],
            opacity_logit,
            color,
            feature,
        })?;
    }
    let radius = bounding_radius(&cloud.positions);
    cloud.scene_extent = if radius > 1e-6 * extent { radius } else { extent };
    Ok(cloud)
}
