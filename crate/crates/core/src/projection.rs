//! EWA projection of 3D Gaussians to screen space, tile binning, and the
//! backward pass through the projection.
//!
//! The 3D covariance is rebuilt from `(q, s)` on every call as
//! `Σ = R S Sᵀ Rᵀ`; it is never stored. The 2D covariance is
//! `J W Σ Wᵀ Jᵀ + 0.3 I` where `J` is the affine approximation of the
//! perspective projection at the camera-space mean.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::CameraView;
use crate::scene::GaussianCloud;

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the 2D covariance diagonal; keeps it invertible and gives
/// every splat a footprint of at least about one pixel.
pub const LOW_PASS: f64 = 0.3;

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(q: [f64; 4]) -> Matrix3<f64> {
    let [r, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - r * z),
        2.0 * (x * z + r * y),
        2.0 * (x * y + r * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - r * x),
        2.0 * (x * z - r * y),
        2.0 * (y * z + r * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and positive scales.
pub fn build_covariance(rotation: [f64; 4], scale: [f64; 3]) -> Matrix3<f64> {
    let m = quat_to_rotmat(rotation) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv_cov2d: Matrix2<f64>,
    pub depth: f64,
    /// 3σ bound in pixels.
    pub radius: f64,
    pub source_index: usize,
}

/// Forward quantities the backward pass needs for one projected Gaussian.
#[derive(Debug, Clone)]
pub struct ProjectionRecord {
    pub cam_point: Vector3<f64>,
    pub cov3d: Matrix3<f64>,
    /// Normalized quaternion and the norm of the stored one.
    pub unit_quat: [f64; 4],
    pub quat_norm: f64,
    pub scale: [f64; 3],
}

/// Projects one Gaussian with 3D covariance `cov3d` centered at
/// `position`. Returns `None` when it is culled (behind the near plane or
/// its 3σ disk misses the image).
pub fn project(cov3d: &Matrix3<f64>, position: Vector3<f64>, view: &CameraView) -> Option<(ProjectedGaussian, Vector3<f64>)> {
    let w = view.rotation();
    let t = w * position + view.translation();
    if t.z <= NEAR_PLANE {
        return None;
    }
    let j = perspective_jacobian(view, &t);
    let m = j * w;
    let cov2d = m * cov3d * m.transpose() + Matrix2::identity() * LOW_PASS;
    let cov2d = symmetrize(cov2d);
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let inv = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(view.fx * t.x / t.z + view.cx, view.fy * t.y / t.z + view.cy);
    let radius = (3.0 * max_eigenvalue(&cov2d).sqrt()).ceil();
    let image = Rect {
        x0: 0.0,
        y0: 0.0,
        x1: view.width as f64,
        y1: view.height as f64,
    };
    if !disk_overlaps_rect(&mean2d, radius, &image) {
        return None;
    }
    Some((
        ProjectedGaussian {
            mean2d,
            cov2d,
            inv_cov2d: inv,
            depth: t.z,
            radius,
            source_index: usize::MAX,
        },
        t,
    ))
}

fn perspective_jacobian(view: &CameraView, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        view.fx * iz,
        0.0,
        -view.fx * t.x * iz2,
        0.0,
        view.fy * iz,
        -view.fy * t.y * iz2,
    )
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

pub fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    mid + (mid * mid - det).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Open-disk test: true when some point of the rectangle lies strictly
/// within `radius` of `center`.
pub fn disk_overlaps_rect(center: &Vector2<f64>, radius: f64, rect: &Rect) -> bool {
    let dx = (rect.x0 - center.x).max(0.0).max(center.x - rect.x1);
    let dy = (rect.y0 - center.y).max(0.0).max(center.y - rect.y1);
    dx * dx + dy * dy < radius * radius
}

/// All visible Gaussians of a cloud in one view, plus what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct Projection {
    pub projected: Vec<ProjectedGaussian>,
    pub records: Vec<ProjectionRecord>,
}

/// Projects every Gaussian of `cloud` in parallel. Output order follows
/// the cloud order; culled Gaussians are absent.
pub fn project_cloud(cloud: &GaussianCloud, view: &CameraView) -> Projection {
    let results: Vec<Option<(ProjectedGaussian, ProjectionRecord)>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let raw = cloud.rotations[i].map(|v| v as f64);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit_quat = raw.map(|v| v / norm);
            let scale = cloud.scale(i);
            let cov3d = build_covariance(unit_quat, scale);
            let p = cloud.positions[i];
            let position = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            project(&cov3d, position, view).map(|(mut pg, cam_point)| {
                pg.source_index = i;
                (
                    pg,
                    ProjectionRecord {
                        cam_point,
                        cov3d,
                        unit_quat,
                        quat_norm: norm,
                        scale,
                    },
                )
            })
        })
        .collect();
    let (projected, records) = results.into_iter().flatten().unzip();
    Projection { projected, records }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileBinning {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile (row-major), indices into the projected list, front to back.
    pub tiles: Vec<Vec<u32>>,
}

impl TileBinning {
    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        &self.tiles[ty * self.tiles_x + tx]
    }

    pub fn tile_rect(tx: usize, ty: usize, view: &CameraView) -> Rect {
        Rect {
            x0: (tx * TILE_SIZE) as f64,
            y0: (ty * TILE_SIZE) as f64,
            x1: ((tx + 1) * TILE_SIZE).min(view.width) as f64,
            y1: ((ty + 1) * TILE_SIZE).min(view.height) as f64,
        }
    }
}

/// Assigns each projected Gaussian to every 16×16 tile its radius disk
/// overlaps, and sorts each tile front to back (ties by source index).
pub fn bin_tiles(projected: &[ProjectedGaussian], view: &CameraView) -> TileBinning {
    let tiles_x = view.width.div_ceil(TILE_SIZE);
    let tiles_y = view.height.div_ceil(TILE_SIZE);
    // Global depth order first; per-tile lists inherit it.
    let mut order: Vec<u32> = (0..projected.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
        pa.depth
            .total_cmp(&pb.depth)
            .then(pa.source_index.cmp(&pb.source_index))
    });
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for idx in order {
        let p = &projected[idx as usize];
        let tx0 = ((p.mean2d.x - p.radius) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let ty0 = ((p.mean2d.y - p.radius) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let tx1 = (((p.mean2d.x + p.radius) / TILE_SIZE as f64).floor().max(0.0) as usize).min(tiles_x - 1);
        let ty1 = (((p.mean2d.y + p.radius) / TILE_SIZE as f64).floor().max(0.0) as usize).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                if disk_overlaps_rect(&p.mean2d, p.radius, &TileBinning::tile_rect(tx, ty, view)) {
                    tiles[ty * tiles_x + tx].push(idx);
                }
            }
        }
    }
    TileBinning {
        tiles_x,
        tiles_y,
        tiles,
    }
}

/// Gradients of the projection with respect to the stored parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectionGrads {
    pub position: [f64; 3],
    /// With respect to the stored (not renormalized) quaternion.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub log_scale: [f64; 3],
}

/// Chains `dL/dmean2d` and `dL/dcov2d` back to position, rotation, and
/// scale. `grad_cov2d` is the full-matrix gradient: `dL = Σ G_ij dΣ'_ij`.
pub fn project_backward(
    grad_mean2d: Vector2<f64>,
    grad_cov2d: &Matrix2<f64>,
    record: &ProjectionRecord,
    view: &CameraView,
) -> ProjectionGrads {
    let t = record.cam_point;
    let w = view.rotation();
    let j = perspective_jacobian(view, &t);
    let m = j * w;
    let g2 = symmetrize(*grad_cov2d);

    // cov2d = M Σ Mᵀ
    let grad_cov3d = m.transpose() * g2 * m;
    let grad_m = 2.0 * g2 * m * record.cov3d;
    let grad_j = grad_m * w.transpose();

    let (fx, fy) = (view.fx, view.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut grad_t = Vector3::zeros();
    // mean2d
    grad_t.x += grad_mean2d.x * fx * iz;
    grad_t.y += grad_mean2d.y * fy * iz;
    grad_t.z += -grad_mean2d.x * fx * t.x * iz2 - grad_mean2d.y * fy * t.y * iz2;
    // J entries
    grad_t.z += grad_j[(0, 0)] * (-fx * iz2);
    grad_t.x += grad_j[(0, 2)] * (-fx * iz2);
    grad_t.z += grad_j[(0, 2)] * (2.0 * fx * t.x * iz3);
    grad_t.z += grad_j[(1, 1)] * (-fy * iz2);
    grad_t.y += grad_j[(1, 2)] * (-fy * iz2);
    grad_t.z += grad_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let grad_pos = w.transpose() * grad_t;

    // Σ = (R S)(R S)ᵀ
    let rot = quat_to_rotmat(record.unit_quat);
    let s = Matrix3::from_diagonal(&Vector3::from(record.scale));
    let rs = rot * s;
    let gsym = 0.5 * (grad_cov3d + grad_cov3d.transpose());
    let grad_rs = 2.0 * gsym * rs;
    let grad_r = grad_rs * s;
    let grad_s_mat = rot.transpose() * grad_rs;
    let scale = [grad_s_mat[(0, 0)], grad_s_mat[(1, 1)], grad_s_mat[(2, 2)]];
    let log_scale = [0, 1, 2].map(|k| scale[k] * record.scale[k]);

    let grad_unit_q = rotmat_backward(record.unit_quat, &grad_r);
    // q̂ = q / |q|
    let qh = record.unit_quat;
    let dot: f64 = (0..4).map(|k| qh[k] * grad_unit_q[k]).sum();
    let rotation = [0, 1, 2, 3].map(|k| (grad_unit_q[k] - qh[k] * dot) / record.quat_norm);

    ProjectionGrads {
        position: [grad_pos.x, grad_pos.y, grad_pos.z],
        rotation,
        scale,
        log_scale,
    }
}

/// `dL/dq` given `G = dL/dR` for `R = quat_to_rotmat(q)`.
fn rotmat_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [r, x, y, z] = q;
    let g = |i: usize, j: usize| g[(i, j)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - r * g(1, 2) + z * g(2, 0)
            + r * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + r * g(0, 2) + x * g(1, 0) + z * g(1, 2) - r * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - r * g(0, 1) + x * g(0, 2) + r * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}
