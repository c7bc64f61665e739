//! Adaptive density control: prune transparent or oversized Gaussians,
//! clone small ones and split large ones that keep receiving large
//! screen-space gradients.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::AdamState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::projection::quat_to_rotmat;
use crate::scene::{Gaussian, GaussianCloud};

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

/// Refinement step. `grad_norms` are the mean view-space gradient norms
/// since the previous call. Survivors keep their order and Adam moments;
/// clones and split children are appended with zeroed moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    grad_norms: &[f64],
    adam: &mut AdamState,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    assert_eq!(grad_norms.len(), cloud.len());
    assert_eq!(adam.num_gaussians(), cloud.len());
    let extent = cloud.scene_extent as f64;
    let room = config.max_gaussians.saturating_sub(cloud.len());
    let mut report = DensifyReport::default();
    let mut keep = vec![true; cloud.len()];
    let mut added = Vec::new();

    for i in 0..cloud.len() {
        let max_scale = cloud.max_scale(i);
        if cloud.opacity(i) < config.opacity_prune_epsilon || max_scale > 0.5 * extent {
            keep[i] = false;
            report.pruned += 1;
            continue;
        }
        if grad_norms[i] <= config.densify_grad_threshold || added.len() + 2 > room {
            continue;
        }
        let parent = cloud.get(i);
        if max_scale > config.size_threshold * extent {
            keep[i] = false;
            report.split += 1;
            added.extend(split(&parent, rng));
        } else {
            report.cloned += 1;
            added.push(parent);
        }
    }

    if !keep.iter().any(|&k| k) && added.is_empty() {
        return Err(Error::AllPruned);
    }
    cloud.retain_mask(&keep);
    adam.retain_gaussians(&keep);
    let count = added.len();
    for g in added {
        cloud.push(g)?;
    }
    adam.push_zero_gaussians(count);
    Ok(report)
}

/// Two children drawn from the parent's own density, each with the scale
/// divided by [`SPLIT_SCALE_DIVISOR`]; every other attribute is copied.
pub fn split(parent: &Gaussian, rng: &mut impl Rng) -> [Gaussian; 2] {
    let q = parent.rotation.map(f64::from);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rot = quat_to_rotmat(q.map(|v| v / n));
    let scale = parent.scale();
    let shrink = SPLIT_SCALE_DIVISOR.ln() as f32;
    let center = Vector3::from(parent.position.map(f64::from));
    let mut child = || {
        let z = Vector3::from([0; 3].map(|_| rng.sample::<f64, _>(StandardNormal)));
        let offset = rot * Vector3::new(scale[0] * z.x, scale[1] * z.y, scale[2] * z.z);
        let p = center + offset;
        Gaussian {
            position: [p.x as f32, p.y as f32, p.z as f32],
            log_scale: parent.log_scale.map(|s| s - shrink),
            ..parent.clone()
        }
    };
    [child(), child()]
}
